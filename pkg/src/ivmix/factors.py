"""Raw error functions of the GNSS factor graph and their Jacobians.

State layout per epoch is ``[x, y, z, phi, delta, delta_dot]``. Each error
comes in two flavours: a single-instance function taking the domain types and
a batched ``*_batch`` function on arrays used by the solver.
"""

from __future__ import annotations

from typing import Tuple

import numpy as np

from .core import ClockState, OdometryMeasurement, PoseState, PseudorangeMeasurement, normalize_angles

DEFAULT_CLOCK_SQRT_INFO = np.diag([10.0, 10.0])


def pseudorange_error_batch(pos: np.ndarray, delta: np.ndarray, sat_pos: np.ndarray, ranges: np.ndarray):
    """Errors ||sat - p|| + delta - range and the unit line-of-sight rows.

    Returns ``(e (n,), d e / d p (n, 3))``; the derivative w.r.t. delta is 1.
    """
    diff = sat_pos - pos
    dist = np.sqrt(np.einsum("ni,ni->n", diff, diff))
    if np.any(dist == 0):
        raise ValueError("satellite and receiver positions coincide")
    return dist + delta - ranges, -diff / dist[:, None]


def pseudorange_error(pose: PoseState, clock: ClockState, z: PseudorangeMeasurement) -> float:
    e, _ = pseudorange_error_batch(
        np.array([[pose.x, pose.y, pose.z]]), np.array([clock.delta]), np.array([z.sat_pos]), np.array([z.range])
    )
    return float(e[0])


def pseudorange_jacobian(pose: PoseState, clock: ClockState, z: PseudorangeMeasurement) -> np.ndarray:
    """d e / d (x, y, z, delta) as a length-4 vector."""
    _, jp = pseudorange_error_batch(
        np.array([[pose.x, pose.y, pose.z]]), np.array([clock.delta]), np.array([z.sat_pos]), np.array([z.range])
    )
    return np.append(jp[0], 1.0)


def odometry_error_batch(pose0: np.ndarray, pose1: np.ndarray, meas: np.ndarray):
    """Body-frame displacement and yaw increment errors.

    ``pose0``/``pose1`` are (n, 4) as (x, y, z, phi), ``meas`` is (n, 4) as
    (forward, lateral, vertical, dyaw). Returns ``(e (n, 4), J0 (n, 4, 4), J1 (n, 4, 4))``.
    """
    d = pose1[:, :3] - pose0[:, :3]
    c, s = np.cos(pose0[:, 3]), np.sin(pose0[:, 3])
    bx = c * d[:, 0] + s * d[:, 1]
    by = -s * d[:, 0] + c * d[:, 1]
    e = np.column_stack([
        bx - meas[:, 0],
        by - meas[:, 1],
        d[:, 2] - meas[:, 2],
        normalize_angles(pose1[:, 3] - pose0[:, 3] - meas[:, 3]),
    ])
    n = pose0.shape[0]
    j1 = np.zeros((n, 4, 4))
    j1[:, 0, 0], j1[:, 0, 1] = c, s
    j1[:, 1, 0], j1[:, 1, 1] = -s, c
    j1[:, 2, 2] = 1.0
    j1[:, 3, 3] = 1.0
    j0 = -j1
    j0[:, 0, 3] = by
    j0[:, 1, 3] = -bx
    j0[:, 2, 3] = 0.0
    return e, j0, j1


def odometry_error(pose_t: PoseState, pose_t1: PoseState, z: OdometryMeasurement) -> np.ndarray:
    e, _, _ = odometry_error_batch(pose_t.as_array()[None], pose_t1.as_array()[None], z.as_array()[None])
    return e[0]


def odometry_jacobians(pose_t: PoseState, pose_t1: PoseState, z: OdometryMeasurement) -> Tuple[np.ndarray, np.ndarray]:
    _, j0, j1 = odometry_error_batch(pose_t.as_array()[None], pose_t1.as_array()[None], z.as_array()[None])
    return j0[0], j1[0]


CLOCK_JAC_NEXT = np.eye(2)


def clock_cced_error_batch(clock0: np.ndarray, clock1: np.ndarray, dt: np.ndarray):
    """Constant clock drift model errors; returns ``(e (n, 2), J0 (n, 2, 2), J1 (2, 2))``."""
    e = np.column_stack([
        clock1[:, 0] - (clock0[:, 0] + clock0[:, 1] * dt),
        clock1[:, 1] - clock0[:, 1],
    ])
    j0 = np.zeros((clock0.shape[0], 2, 2))
    j0[:, 0, 0] = -1.0
    j0[:, 0, 1] = -dt
    j0[:, 1, 1] = -1.0
    return e, j0, CLOCK_JAC_NEXT


def clock_cced_error(clock_t: ClockState, clock_t1: ClockState, dt: float) -> np.ndarray:
    if not dt > 0:
        raise ValueError("dt must be positive")
    e, _, _ = clock_cced_error_batch(clock_t.as_array()[None], clock_t1.as_array()[None], np.array([dt]))
    return e[0]


def clock_sqrt_info(dt, base: np.ndarray = DEFAULT_CLOCK_SQRT_INFO) -> np.ndarray:
    """Square-root information of the drift model, base / sqrt(dt) (random-walk scaling)."""
    dt = np.atleast_1d(np.asarray(dt, dtype=float))
    return base[None] / np.sqrt(dt)[:, None, None]


def prior_error(state_vec, prior_mean, sqrt_info) -> np.ndarray:
    """sqrt_info (state - mean)."""
    x = np.atleast_1d(np.asarray(state_vec, dtype=float))
    m = np.atleast_1d(np.asarray(prior_mean, dtype=float))
    s = np.atleast_2d(np.asarray(sqrt_info, dtype=float))
    if x.shape != m.shape or s.shape != (x.shape[0], x.shape[0]):
        raise ValueError("prior dimensions do not agree")
    return s @ (x - m)
