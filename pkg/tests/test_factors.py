import math

import numpy as np
import pytest

from ivmix.core import ClockState, OdometryMeasurement, PoseState, PseudorangeMeasurement
from ivmix.factors import (
    clock_cced_error,
    clock_cced_error_batch,
    odometry_error,
    odometry_jacobians,
    prior_error,
    pseudorange_error,
    pseudorange_jacobian,
)


def central_diff(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        step = h * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        cols.append((np.atleast_1d(f(xp)) - np.atleast_1d(f(xm))) / (2 * step))
    return np.column_stack(cols)


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def test_pseudorange_examples():
    z = PseudorangeMeasurement(0.0, 1, (20200e3, 0, 0), 20200e3, 3.0)
    assert pseudorange_error(PoseState(0, 0, 0, 0), ClockState(0, 0), z) == 0.0
    assert pseudorange_error(PoseState(0, 0, 0, 0), ClockState(5, 0), z) == 5.0
    np.testing.assert_array_equal(pseudorange_jacobian(PoseState(0, 0, 0, 0), ClockState(0, 0), z), [-1, 0, 0, 1])


def test_pseudorange_coincident_positions_rejected():
    z = PseudorangeMeasurement(0.0, 1, (1.0, 2.0, 3.0), 5.0, 3.0)
    with pytest.raises(ValueError):
        pseudorange_error(PoseState(1, 2, 3, 0), ClockState(0, 0), z)


def test_pseudorange_jacobian_vs_finite_differences():
    rng = np.random.default_rng(1)
    for _ in range(100):
        sat = rng.normal(size=3)
        sat = 2.02e7 * sat / np.linalg.norm(sat)
        z = PseudorangeMeasurement(0.0, 1, tuple(sat), 2.02e7 + rng.normal(0, 100), 3.0)
        v = np.array([*rng.normal(0, 1000, 3), rng.normal(0, 100)])
        f = lambda u: pseudorange_error(PoseState(u[0], u[1], u[2], 0), ClockState(u[3], 0), z)
        num = central_diff(f, v, h=1e-3)[0]
        ana = pseudorange_jacobian(PoseState(*v[:3], 0), ClockState(v[3], 0), z)
        assert rel_err(ana, num) < 1e-6


def test_pseudorange_translation_invariance():
    rng = np.random.default_rng(2)
    for _ in range(20):
        sat, p, shift = rng.normal(0, 1e6, 3), rng.normal(0, 100, 3), rng.normal(0, 1e4, 3)
        z = PseudorangeMeasurement(0.0, 1, tuple(sat), 1e6, 3.0)
        zs = PseudorangeMeasurement(0.0, 1, tuple(sat + shift), 1e6, 3.0)
        e = pseudorange_error(PoseState(*p, 0), ClockState(1, 0), z)
        es = pseudorange_error(PoseState(*(p + shift), 0), ClockState(1, 0), zs)
        assert es == pytest.approx(e, abs=1e-6)


def _odo(fwd=0.0, lat=0.0, vert=0.0, dyaw=0.0):
    return OdometryMeasurement(0.0, 1.0, fwd, lat, vert, dyaw)


def test_odometry_examples():
    rng = np.random.default_rng(3)
    for _ in range(10):
        p = PoseState(*rng.normal(0, 100, 3), rng.uniform(-3, 3))
        np.testing.assert_allclose(odometry_error(p, p, _odo()), 0.0, atol=1e-12)
    e = odometry_error(PoseState(0, 0, 0, math.pi / 2), PoseState(0, 3, 0, math.pi / 2), _odo(fwd=3.0))
    np.testing.assert_allclose(e, 0.0, atol=1e-12)


def test_odometry_jacobians_vs_finite_differences():
    rng = np.random.default_rng(4)
    for _ in range(100):
        a = np.array([*rng.normal(0, 50, 3), rng.uniform(-3, 3)])
        d = rng.normal(0, 5, 4)
        d[3] = rng.uniform(-0.5, 0.5)
        b = a + d
        z = _odo(*rng.normal(0, 5, 3), rng.uniform(-0.5, 0.5))
        j0, j1 = odometry_jacobians(PoseState.from_array(a), PoseState.from_array(b), z)
        n0 = central_diff(lambda u: odometry_error(PoseState.from_array(u), PoseState.from_array(b), z), a)
        n1 = central_diff(lambda u: odometry_error(PoseState.from_array(a), PoseState.from_array(u), z), b)
        assert rel_err(j0, n0) < 1e-5
        assert rel_err(j1, n1) < 1e-5


def test_clock_cced_examples_and_linearity():
    np.testing.assert_array_equal(clock_cced_error(ClockState(0, 1), ClockState(1, 1), 1.0), [0, 0])
    assert clock_cced_error(ClockState(0, 0), ClockState(0, 0.5), 1.0)[1] == 0.5
    with pytest.raises(ValueError):
        clock_cced_error(ClockState(0, 0), ClockState(0, 0), 0.0)
    rng = np.random.default_rng(5)
    for _ in range(100):
        c0, c1, dt = rng.normal(0, 100, 2), rng.normal(0, 100, 2), rng.uniform(0.1, 5)
        _, j0, j1 = clock_cced_error_batch(c0[None], c1[None], np.array([dt]))
        n0 = central_diff(lambda u: clock_cced_error(ClockState(*u), ClockState(*c1), dt), c0)
        n1 = central_diff(lambda u: clock_cced_error(ClockState(*c0), ClockState(*u), dt), c1)
        assert rel_err(j0[0], n0) < 1e-5 and rel_err(j1, n1) < 1e-5
        # exactly linear: error(a + b) - error(a) equals J b
        step0, step1 = rng.normal(size=2), rng.normal(size=2)
        lin = (clock_cced_error(ClockState(*(c0 + step0)), ClockState(*(c1 + step1)), dt)
               - clock_cced_error(ClockState(*c0), ClockState(*c1), dt))
        np.testing.assert_allclose(lin, j0[0] @ step0 + j1 @ step1, atol=1e-9)


def test_prior_error_examples():
    np.testing.assert_array_equal(prior_error([1, 2], [1, 2], np.eye(2)), [0, 0])
    assert prior_error(2.0, 0.0, 3.0)[0] == 6.0
    assert abs(prior_error(1e3, 0.0, 1e-12)[0]) < 1e-8
    with pytest.raises(ValueError):
        prior_error([1, 2], [1], np.eye(2))
