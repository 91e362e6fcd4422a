import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivmix.core import (
    ClockState,
    OdometryMeasurement,
    PoseState,
    PseudorangeMeasurement,
    StateWindow,
    check_time_order,
    normalize_angle,
    normalize_angles,
    trim_window,
)


def test_normalize_angle_examples():
    assert normalize_angle(0.0) == 0.0
    assert normalize_angle(3 * math.pi) == pytest.approx(math.pi)
    assert normalize_angle(-3.5 * math.pi) == pytest.approx(0.5 * math.pi)
    assert normalize_angle(-math.pi) == pytest.approx(math.pi)


@pytest.mark.parametrize("bad", [math.inf, -math.inf, math.nan])
def test_normalize_angle_rejects_non_finite(bad):
    with pytest.raises(ValueError):
        normalize_angle(bad)
    with pytest.raises(ValueError):
        normalize_angles(np.array([0.0, bad]))


@given(st.floats(min_value=-1e4, max_value=1e4, allow_nan=False))
def test_normalize_angle_range_and_congruence(a):
    w = normalize_angle(a)
    assert -math.pi < w <= math.pi
    turns = (a - w) / (2 * math.pi)
    assert abs(turns - round(turns)) < 1e-9
    assert normalize_angle(w) == pytest.approx(w, abs=1e-15)
    v = normalize_angles(np.array([a]))[0]
    assert -math.pi < v <= math.pi
    assert abs(math.remainder(v - w, 2 * math.pi)) < 1e-9


def test_pose_state_normalizes_and_validates():
    assert PoseState(0, 0, 0, 3 * math.pi).phi == pytest.approx(math.pi)
    with pytest.raises(ValueError):
        PoseState(math.nan, 0, 0, 0)
    p = PoseState(1, 2, 3, 0.5)
    assert PoseState.from_array(p.as_array()) == p


def test_clock_state_drift_bound():
    ClockState(5.0, 999.0)
    with pytest.raises(ValueError):
        ClockState(0.0, 1e3)
    with pytest.raises(ValueError):
        ClockState(math.inf, 0.0)


def test_measurement_invariants():
    with pytest.raises(ValueError):
        PseudorangeMeasurement(0.0, 1, (1, 2, 3), -1.0, 3.0)
    with pytest.raises(ValueError):
        PseudorangeMeasurement(0.0, 1, (1, 2, 3), 1.0, 0.0)
    with pytest.raises(ValueError):
        OdometryMeasurement(0.0, 0.0, 1, 0, 0, 0)
    with pytest.raises(ValueError):
        OdometryMeasurement(0.0, 1.0, 1, 0, 0, 0, info=-np.eye(4))
    with pytest.raises(ValueError):
        OdometryMeasurement(0.0, 1.0, 1, 0, 0, 0, info=np.eye(4) + np.triu(np.ones((4, 4)), 1))


def _window(times, span=60.0):
    w = StateWindow(window_span=span)
    for t in times:
        w.append(t, PoseState(t, 0, 0, 0), ClockState(0, 0))
    return w


def test_window_append_requires_increasing_time():
    w = _window([0, 1])
    with pytest.raises(ValueError):
        w.append(1, PoseState(0, 0, 0, 0), ClockState(0, 0))


def test_trim_window_examples():
    w, _ = trim_window(_window([0, 30, 61]), [], 61)
    assert w.times == [30, 61]
    # the state at exactly now - span is kept
    w, _ = trim_window(_window([1, 30, 61]), [], 61)
    assert w.times == [1, 30, 61]
    full = _window([0, 10, 20])
    w, _ = trim_window(full, [], 20)
    assert w.times == full.times
    w, _ = trim_window(_window(range(121)), [], 120)
    assert len(w) == 61 and w.times[0] == 60


def test_trim_window_drops_old_measurements():
    ms = [PseudorangeMeasurement(float(t), 1, (1e7, 0, 0), 1e7, 3.0) for t in (0, 59, 60, 70)]
    _, kept = trim_window(_window([0, 60, 70]), ms, 120)
    assert [m.time for m in kept] == [60, 70]


@settings(max_examples=100)
@given(st.lists(st.tuples(st.floats(0.01, 20.0), st.floats(0.0, 200.0)), max_size=40))
def test_window_ordering_and_trim_idempotence(events):
    """Random append/trim sequences keep the window ordered and within its span."""
    w = StateWindow(window_span=60.0)
    t = 0.0
    for gap, trim_at in events:
        t += gap
        w.append(t, PoseState(0, 0, 0, 0), ClockState(0, 0))
        now = t + trim_at * 0.1
        w, _ = trim_window(w, [], now)
        assert all(a < b for a, b in zip(w.times, w.times[1:]))
        assert all(now - s <= w.window_span for s in w.times)
        again, _ = trim_window(w, [], now)
        assert again.times == w.times


def test_check_time_order_names_offending_record():
    a = PseudorangeMeasurement(2.0, 1, (1e7, 0, 0), 1e7, 3.0)
    b = PseudorangeMeasurement(1.0, 2, (1e7, 0, 0), 1e7, 3.0)
    check_time_order([b, a])
    with pytest.raises(ValueError, match="t=1.0"):
        check_time_order([a, b])
