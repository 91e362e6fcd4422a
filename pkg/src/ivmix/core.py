"""Shared domain types: states, measurements, error samples and the sliding window."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np

DEFAULT_WINDOW_SPAN = 60.0
MAX_CLOCK_DRIFT = 1e3


def normalize_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    if not math.isfinite(a):
        raise ValueError(f"angle must be finite, got {a!r}")
    wrapped = math.remainder(a, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


def normalize_angles(a: np.ndarray) -> np.ndarray:
    """Vectorized :func:`normalize_angle`."""
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValueError("angles must be finite")
    wrapped = np.remainder(a, 2.0 * np.pi)
    wrapped = np.where(wrapped > np.pi, wrapped - 2.0 * np.pi, wrapped)
    return wrapped


@dataclass(frozen=True)
class PoseState:
    x: float
    y: float
    z: float
    phi: float

    def __post_init__(self):
        for name in ("x", "y", "z", "phi"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"PoseState.{name} must be finite")
        object.__setattr__(self, "phi", normalize_angle(self.phi))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.phi])

    @classmethod
    def from_array(cls, v) -> "PoseState":
        return cls(float(v[0]), float(v[1]), float(v[2]), float(v[3]))


@dataclass(frozen=True)
class ClockState:
    """Receiver clock offset (meters) and drift (meters/second)."""

    delta: float
    delta_dot: float

    def __post_init__(self):
        if not (math.isfinite(self.delta) and math.isfinite(self.delta_dot)):
            raise ValueError("ClockState entries must be finite")
        if abs(self.delta_dot) >= MAX_CLOCK_DRIFT:
            raise ValueError(f"clock drift {self.delta_dot} m/s exceeds sanity bound {MAX_CLOCK_DRIFT}")

    def as_array(self) -> np.ndarray:
        return np.array([self.delta, self.delta_dot])

    @classmethod
    def from_array(cls, v) -> "ClockState":
        return cls(float(v[0]), float(v[1]))


@dataclass(frozen=True)
class PseudorangeMeasurement:
    time: float
    sat_id: int
    sat_pos: Tuple[float, float, float]
    range: float
    nominal_std: float

    def __post_init__(self):
        object.__setattr__(self, "sat_pos", tuple(float(c) for c in self.sat_pos))
        if len(self.sat_pos) != 3:
            raise ValueError("sat_pos must be a 3-vector")
        if not self.range > 0:
            raise ValueError(f"pseudorange must be positive, got {self.range}")
        if not self.nominal_std > 0:
            raise ValueError(f"nominal_std must be positive, got {self.nominal_std}")
        if self.time < 0:
            raise ValueError("timestamps are non-negative")


@dataclass(frozen=True)
class OdometryMeasurement:
    """Body-frame motion from ``time`` to ``time + dt``.

    ``info`` is the 4x4 information matrix of (forward, lateral, vertical, dyaw).
    """

    time: float
    dt: float
    forward: float
    lateral: float
    vertical: float
    dyaw: float
    info: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        info = np.array(self.info, dtype=float)
        if info.shape != (4, 4):
            raise ValueError("odometry info must be 4x4")
        if not np.allclose(info, info.T):
            raise ValueError("odometry info must be symmetric")
        try:
            np.linalg.cholesky(info)
        except np.linalg.LinAlgError:
            raise ValueError("odometry info must be positive definite") from None
        info.setflags(write=False)
        object.__setattr__(self, "info", info)
        if not self.dt > 0:
            raise ValueError(f"odometry dt must be positive, got {self.dt}")
        if self.time < 0:
            raise ValueError("timestamps are non-negative")

    def as_array(self) -> np.ndarray:
        return np.array([self.forward, self.lateral, self.vertical, self.dyaw])

    def __eq__(self, other):
        if not isinstance(other, OdometryMeasurement):
            return NotImplemented
        return (
            self.time == other.time
            and self.dt == other.dt
            and np.array_equal(self.as_array(), other.as_array())
            and np.array_equal(self.info, other.info)
        )

    __hash__ = None


Measurement = Union[PseudorangeMeasurement, OdometryMeasurement]


@dataclass(frozen=True)
class ErrorSample:
    value: np.ndarray
    source_factor: int
    time: float


@dataclass
class StateWindow:
    """Time-ordered states inside the sliding horizon."""

    times: List[float] = field(default_factory=list)
    poses: List[PoseState] = field(default_factory=list)
    clocks: List[ClockState] = field(default_factory=list)
    window_span: float = DEFAULT_WINDOW_SPAN

    def __len__(self):
        return len(self.times)

    def append(self, time: float, pose: PoseState, clock: ClockState) -> None:
        if self.times and time <= self.times[-1]:
            raise ValueError(f"state time {time} not after last state {self.times[-1]}")
        if time < 0:
            raise ValueError("timestamps are non-negative")
        self.times.append(float(time))
        self.poses.append(pose)
        self.clocks.append(clock)

    def copy(self) -> "StateWindow":
        return StateWindow(list(self.times), list(self.poses), list(self.clocks), self.window_span)


def trim_window(
    w: StateWindow, measurements: Iterable[Measurement], now: float
) -> Tuple[StateWindow, List[Measurement]]:
    """Drop states and measurements older than ``now - window_span``.

    Items exactly at the boundary are kept. Nothing is marginalized.
    """
    cutoff = now - w.window_span
    keep = [i for i, t in enumerate(w.times) if t >= cutoff]
    trimmed = StateWindow(
        [w.times[i] for i in keep],
        [w.poses[i] for i in keep],
        [w.clocks[i] for i in keep],
        w.window_span,
    )
    kept = [m for m in measurements if m.time >= cutoff]
    return trimmed, kept


def check_time_order(records: Sequence[Measurement]) -> None:
    """Raise if the stream is not non-decreasing in time."""
    for prev, cur in zip(records, records[1:]):
        if cur.time < prev.time:
            raise ValueError(f"out-of-order measurement at t={cur.time} (after t={prev.time}): {cur!r}")
