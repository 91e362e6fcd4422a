"""Levenberg-Marquardt over a sliding-window factor graph.

Variables are stacked per epoch as ``[x, y, z, phi, delta, delta_dot]``.
Factors are stored by kind in arrays so that residuals and Jacobians are
evaluated in a handful of vectorized operations; the normal equations are
assembled in banded form (dense for wide problems) and solved by Cholesky.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.sparse as sp
from scipy.linalg import LinAlgError, cho_factor, cho_solve, cholesky_banded, cho_solve_banded

from .core import ClockState, ErrorSample, PoseState, normalize_angles
from .factors import clock_cced_error_batch, odometry_error_batch, pseudorange_error_batch
from .robust import SQRT_HALF, GaussianModel, RobustModel

logger = logging.getLogger(__name__)

STATE_DIM = 6
YAW = 3
FACTOR_KINDS = ("pseudorange", "odometry", "clock", "prior")


class NumericalFailure(RuntimeError):
    pass


@dataclass
class SolverOptions:
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    function_tolerance: float = 1e-8
    gradient_tolerance: float = 1e-10
    max_iterations: int = 100
    max_consecutive_rejections: int = 20
    log_iterations: bool = False


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    termination_reason: str
    rank_deficient: bool = False
    cost_history: List[float] = field(default_factory=list)


@dataclass
class _Block:
    """One factor kind: epoch indices, payload arrays and factor ids."""

    idx: np.ndarray
    data: dict
    ids: np.ndarray


class _Segments:
    """Precomputed grouping of repeated keys for ``target[keys] += vals``."""

    def __init__(self, keys: np.ndarray):
        keys = np.asarray(keys)
        self.order = None if np.all(keys[1:] >= keys[:-1]) else np.argsort(keys, kind="stable")
        k = keys if self.order is None else keys[self.order]
        self.starts = np.flatnonzero(np.concatenate([[True], k[1:] != k[:-1]]))
        self.unique = len(self.starts) == len(k)
        self.keys = k[self.starts]

    def add(self, target: np.ndarray, vals: np.ndarray) -> None:
        v = vals if self.order is None else vals[self.order]
        target[self.keys] += v if self.unique else np.add.reduceat(v, self.starts, axis=0)


class Problem:
    """States of a window plus its pseudorange, odometry, clock and prior factors.

    Pseudorange factors share one robust model (``pseudorange_model``); when
    it is None each pseudorange uses a Gaussian with its own nominal std.
    """

    def __init__(self, times, poses, clocks):
        self.times = np.asarray(times, dtype=float)
        poses = np.asarray(poses, dtype=float).reshape(-1, 4)
        clocks = np.asarray(clocks, dtype=float).reshape(-1, 2)
        if not (len(self.times) == poses.shape[0] == clocks.shape[0]):
            raise ValueError("times, poses and clocks must have the same length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("state times must be strictly increasing")
        self.x = np.hstack([poses, clocks])
        self.pseudorange_model: Optional[RobustModel] = None
        self._pr: List[_Block] = []
        self._odo: List[_Block] = []
        self._clk: List[_Block] = []
        self._prior: List[_Block] = []
        self._next_id = 0
        self._cache = None
        self._segments = {}

    # -- construction -----------------------------------------------------

    @property
    def n_states(self) -> int:
        return self.x.shape[0]

    def _ids(self, n):
        ids = np.arange(self._next_id, self._next_id + n)
        self._next_id += n
        self._cache = None
        self._segments = {}
        return ids

    def _check_idx(self, idx, offset=0):
        idx = np.atleast_1d(np.asarray(idx, dtype=int))
        if np.any(idx < 0) or np.any(idx + offset >= self.n_states):
            raise ValueError("factor references a state outside the window")
        return idx

    def add_pseudoranges(self, idx, sat_pos, ranges, std, times=None):
        idx = self._check_idx(idx)
        sat_pos = np.asarray(sat_pos, dtype=float).reshape(-1, 3)
        ranges = np.asarray(ranges, dtype=float).reshape(-1)
        idx = np.broadcast_to(idx, ranges.shape).copy()
        std = np.broadcast_to(np.asarray(std, dtype=float), ranges.shape).copy()
        t = self.times[idx] if times is None else np.asarray(times, dtype=float)
        self._pr.append(_Block(idx, {"sat": sat_pos, "range": ranges, "std": std, "time": t}, self._ids(len(ranges))))

    def add_odometry(self, idx, meas, sqrt_info):
        """Odometry from state ``idx`` to ``idx + 1``; ``sqrt_info`` is (n, 4, 4) or (4, 4)."""
        idx = self._check_idx(idx, 1)
        meas = np.asarray(meas, dtype=float).reshape(-1, 4)
        s = np.broadcast_to(np.asarray(sqrt_info, dtype=float), (len(idx), 4, 4)).copy()
        self._odo.append(_Block(idx, {"meas": meas, "sqrt": s}, self._ids(len(idx))))

    def add_clock(self, idx, dt, sqrt_info):
        """Constant-drift clock factor from state ``idx`` to ``idx + 1``."""
        idx = self._check_idx(idx, 1)
        dt = np.broadcast_to(np.asarray(dt, dtype=float), idx.shape).copy()
        if np.any(dt <= 0):
            raise ValueError("clock factor dt must be positive")
        s = np.broadcast_to(np.asarray(sqrt_info, dtype=float), (len(idx), 2, 2)).copy()
        self._clk.append(_Block(idx, {"dt": dt, "sqrt": s}, self._ids(len(idx))))

    def add_prior(self, idx: int, mean, sqrt_info):
        """Gaussian prior on the full 6-vector of state ``idx``."""
        idx = self._check_idx(idx)
        mean = np.asarray(mean, dtype=float).reshape(1, STATE_DIM)
        s = np.asarray(sqrt_info, dtype=float).reshape(1, STATE_DIM, STATE_DIM)
        self._prior.append(_Block(idx, {"mean": mean, "sqrt": s}, self._ids(1)))

    def _merged(self):
        if self._cache is None:
            def merge(blocks, keys):
                if not blocks:
                    return None
                return _Block(
                    np.concatenate([b.idx for b in blocks]),
                    {k: np.concatenate([b.data[k] for b in blocks]) for k in keys},
                    np.concatenate([b.ids for b in blocks]),
                )
            self._cache = (
                merge(self._pr, ("sat", "range", "std", "time")),
                merge(self._odo, ("meas", "sqrt")),
                merge(self._clk, ("dt", "sqrt")),
                merge(self._prior, ("mean", "sqrt")),
            )
        return self._cache

    @property
    def n_pseudoranges(self) -> int:
        pr = self._merged()[0]
        return 0 if pr is None else len(pr.idx)

    # -- evaluation -------------------------------------------------------

    def pseudorange_errors(self, x: Optional[np.ndarray] = None) -> np.ndarray:
        """Raw pseudorange errors at ``x`` (default: current states)."""
        x = self.x if x is None else x
        pr = self._merged()[0]
        if pr is None:
            return np.zeros(0)
        e, _ = pseudorange_error_batch(x[pr.idx, :3], x[pr.idx, 4], pr.data["sat"], pr.data["range"])
        return e

    def _pr_model(self, pr):
        if self.pseudorange_model is not None:
            return self.pseudorange_model
        return GaussianModel(0.0, 1.0 / pr.data["std"])

    def _groups(self, x: np.ndarray, jacobian: bool = True, kinds=FACTOR_KINDS):
        """Residual blocks ``(r (n, R), [(state idx (n,), first var, jac (n, R, C), tag), ...])`` per kind."""
        pr, odo, clk, prior = (
            b if k in kinds else None for k, b in zip(FACTOR_KINDS, self._merged())
        )
        out = []
        if pr is not None:
            e, jp = pseudorange_error_batch(x[pr.idx, :3], x[pr.idx, 4], pr.data["sat"], pr.data["range"])
            r, dr = self._pr_model(pr).evaluate(e[:, None])
            if not np.all(np.isfinite(r)):
                bad = int(pr.ids[np.flatnonzero(~np.all(np.isfinite(r), axis=1))[0]])
                raise FloatingPointError(f"non-finite residual in pseudorange factor {bad}")
            blocks = []
            if jacobian:
                # chain rule through the scalar raw error; d e / d delta = 1
                jac = np.zeros((len(e), r.shape[1], 5))
                jac[:, :, :3] = dr[:, :, 0:1] * jp[:, None, :]
                jac[:, :, 4] = dr[:, :, 0]
                blocks = [(pr.idx, 0, jac, "pr")]
            out.append((r, blocks))
        if odo is not None:
            e, j0, j1 = odometry_error_batch(x[odo.idx, :4], x[odo.idx + 1, :4], odo.data["meas"])
            s = SQRT_HALF * odo.data["sqrt"]
            out.append((np.einsum("nij,nj->ni", s, e), [(odo.idx, 0, s @ j0, "odo0"), (odo.idx + 1, 0, s @ j1, "odo1")]))
        if clk is not None:
            e, j0, j1 = clock_cced_error_batch(x[clk.idx, 4:], x[clk.idx + 1, 4:], clk.data["dt"])
            s = SQRT_HALF * clk.data["sqrt"]
            out.append((np.einsum("nij,nj->ni", s, e), [(clk.idx, 4, s @ j0, "clk0"), (clk.idx + 1, 4, s @ j1, "clk1")]))
        if prior is not None:
            d = x[prior.idx] - prior.data["mean"]
            d[:, YAW] = normalize_angles(d[:, YAW])
            s = SQRT_HALF * prior.data["sqrt"]
            out.append((np.einsum("nij,nj->ni", s, d), [(prior.idx, 0, s, "prior")]))
        return out

    def linearize(self, x: np.ndarray, jacobian: bool = True, kinds=FACTOR_KINDS):
        """Stacked residual vector and (optionally) sparse Jacobian at ``x``."""
        groups = self._groups(x, jacobian, kinds)
        r = np.concatenate([g[0].reshape(-1) for g in groups]) if groups else np.zeros(0)
        if not jacobian:
            return r, None
        rows, cols, vals = [], [], []
        row = 0
        for r_blk, blocks in groups:
            n, rdim = r_blk.shape
            base = row + np.arange(n)[:, None] * rdim + np.arange(rdim)[None, :]
            for sidx, var0, jac, _ in blocks:
                cc = sidx[:, None, None] * STATE_DIM + var0 + np.arange(jac.shape[2])[None, None, :]
                rows.append(np.broadcast_to(base[:, :, None], jac.shape).reshape(-1))
                cols.append(np.broadcast_to(cc, jac.shape).reshape(-1))
                vals.append(jac.reshape(-1))
            row += n * rdim
        nvar = self.n_states * STATE_DIM
        if not vals:
            return r, sp.csr_matrix((row, nvar))
        J = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(row, nvar))
        return r, J

    def normal_equations(self, x: np.ndarray):
        """Residuals, H = J^T J (dense), g = J^T r and the half bandwidth of H.

        Accumulated block by block from the per-factor Jacobians without
        forming J. Factors coupling the same or consecutive epochs go into
        block-diagonal and first off-diagonal arrays; anything wider is added
        to H directly.
        """
        T, n6 = self.n_states, self.n_states * STATE_DIM
        diag_blk = np.zeros((T, STATE_DIM, STATE_DIM))
        off_blk = np.zeros((max(T - 1, 0), STATE_DIM, STATE_DIM))
        H = np.zeros((n6, n6))
        g = np.zeros((T, STATE_DIM))
        reach = 0
        res = []
        for r_blk, blocks in self._groups(x):
            res.append(r_blk.reshape(-1))
            for a, (sa, va, ja, ta) in enumerate(blocks):
                ca = slice(va, va + ja.shape[2])
                self._segment(ta, sa).add(g[:, ca], np.einsum("nri,nr->ni", ja, r_blk))
                for sb, vb, jb, tb in blocks[a:]:
                    cb = slice(vb, vb + jb.shape[2])
                    blk = np.einsum("nri,nrj->nij", ja, jb)
                    kind, seg, dist = self._pair(ta, sa, tb, sb)
                    reach = max(reach, dist)
                    if kind == "self":
                        seg.add(diag_blk[:, ca, cb], blk)
                    elif kind == "same":
                        seg.add(diag_blk[:, ca, cb], blk)
                        seg.add(diag_blk[:, cb, ca], blk.transpose(0, 2, 1))
                    elif kind == "next":
                        seg.add(off_blk[:, ca, cb], blk)
                    elif kind == "prev":
                        seg.add(off_blk[:, cb, ca], blk.transpose(0, 2, 1))
                    else:
                        for i, j, m in zip(sa, sb, blk):
                            ri = slice(i * STATE_DIM + va, i * STATE_DIM + ca.stop)
                            rj = slice(j * STATE_DIM + vb, j * STATE_DIM + cb.stop)
                            H[ri, rj] += m
                            H[rj, ri] += m.T
        H4 = H.reshape(T, STATE_DIM, T, STATE_DIM)
        ar = np.arange(T)
        H4[ar, :, ar, :] += diag_blk
        if T > 1:
            H4[ar[:-1], :, ar[1:], :] += off_blk
            H4[ar[1:], :, ar[:-1], :] += off_blk.transpose(0, 2, 1)
        r = np.concatenate(res) if res else np.zeros(0)
        return r, H, g.reshape(-1), STATE_DIM * (reach + 1) - 1

    def _segment(self, tag, keys) -> _Segments:
        seg = self._segments.get(tag)
        if seg is None:
            seg = self._segments[tag] = _Segments(keys)
        return seg

    def _pair(self, ta, sa, tb, sb):
        """How the J_a^T J_b blocks of two Jacobian blocks map into H (cached per tag pair)."""
        key = (ta, tb)
        hit = self._segments.get(key)
        if hit is None:
            d = sb - sa
            dist = int(np.max(np.abs(d))) if len(d) else 0
            if ta == tb:
                hit = ("self", self._segment(ta, sa), 0)
            elif not np.any(d):
                hit = ("same", self._segment(ta, sa), 0)
            elif np.all(d == 1):
                hit = ("next", self._segment(ta, sa), 1)
            elif np.all(d == -1):
                hit = ("prev", self._segment(tb, sb), 1)
            else:
                hit = ("general", None, dist)
            self._segments[key] = hit
        return hit

    def factor_costs(self, x: Optional[np.ndarray] = None) -> dict:
        """Cost per factor kind."""
        x = self.x if x is None else x
        out = {}
        for kind in FACTOR_KINDS:
            r, _ = self.linearize(x, jacobian=False, kinds=(kind,))
            out[kind] = float(r @ r)
        return out


def evaluate_cost(p: Problem, x: Optional[np.ndarray] = None) -> float:
    """Sum over factors of squared robust residual norms."""
    r, _ = p.linearize(p.x if x is None else x, jacobian=False)
    return float(r @ r)


def _retract(x: np.ndarray, step: np.ndarray) -> np.ndarray:
    out = x + step.reshape(x.shape)
    out[:, YAW] = normalize_angles(out[:, YAW])
    return out


class _Normal:
    """Normal matrix in banded storage when its bandwidth is small.

    Window factors only couple consecutive epochs, so H is block tridiagonal
    and banded Cholesky costs O(n b^2) instead of O(n^3).
    """

    def __init__(self, H: np.ndarray, bandwidth: int):
        n = H.shape[0]
        self.u = bandwidth
        self.banded = bandwidth < n // 4
        self.diag = np.diag(H).copy()
        if self.banded:
            ab = np.zeros((self.u + 1, n))
            for k in range(self.u + 1):
                ab[self.u - k, k:] = np.diagonal(H, k)
            self.ab = ab
        else:
            self.H = H

    def factor(self, damping: np.ndarray):
        if self.banded:
            ab = self.ab.copy()
            ab[self.u] += damping
            return ("b", cholesky_banded(ab, check_finite=False))
        return ("d", cho_factor(self.H + np.diag(damping), check_finite=False))

    @staticmethod
    def solve(fac, rhs):
        kind, c = fac
        if kind == "b":
            return cho_solve_banded((c, False), rhs, check_finite=False)
        return cho_solve(c, rhs, check_finite=False)


def solve(p: Problem, opts: Optional[SolverOptions] = None):
    """Minimize the window cost with Levenberg-Marquardt.

    Marquardt scaling: the damped system is (H + lambda diag(H)) dx = -g with
    H = J^T J and g = J^T r. Returns the optimized states (also written back to
    ``p.x``) and a :class:`SolveReport`.
    """
    opts = opts or SolverOptions()
    x = p.x.copy()
    r, H, g, band = p.normal_equations(x)
    cost = float(r @ r)
    if not np.isfinite(cost):
        raise ValueError("non-finite cost at the initial point")
    report = SolveReport(0, cost, cost, False, "max_iterations", cost_history=[cost])
    nvar = x.size
    if nvar == 0 or r.size == 0:
        report.converged, report.termination_reason = True, "empty"
        return x, report
    lam = opts.lambda_init
    rejections = 0
    first = True
    for it in range(opts.max_iterations):
        normal = _Normal(H, band)
        if np.max(np.abs(g)) < opts.gradient_tolerance:
            report.converged, report.termination_reason = True, "gradient"
            break
        if first:
            try:
                normal.factor(np.zeros_like(normal.diag))
            except LinAlgError:
                report.rank_deficient = True
            first = False
        diag = np.maximum(normal.diag, 1e-9)
        accepted = False
        while not accepted:
            try:
                step = normal.solve(normal.factor(lam * diag), -g)
                x_new = _retract(x, step)
                r_new, _ = p.linearize(x_new, jacobian=False)
                cost_new = float(r_new @ r_new)
            except (LinAlgError, FloatingPointError, ValueError):
                cost_new = np.inf
            if np.isfinite(cost_new) and cost_new < cost:
                accepted = True
                rejections = 0
                lam = max(lam / opts.lambda_down, 1e-15)
            else:
                if np.isfinite(cost_new) and cost_new - cost <= opts.function_tolerance * cost:
                    report.converged, report.termination_reason = True, "function_tolerance"
                    break
                rejections += 1
                lam = min(lam * opts.lambda_up, 1e16)
                if rejections >= opts.max_consecutive_rejections:
                    raise NumericalFailure(f"{rejections} consecutive LM steps rejected (lambda={lam:g})")
        if not accepted:
            break
        report.iterations = it + 1
        if opts.log_iterations:
            logger.info("iter %d cost %.9g lambda %.3g", it + 1, cost_new, lam)
        rel = (cost - cost_new) / max(cost, 1e-300)
        x, cost = x_new, cost_new
        report.cost_history.append(cost)
        if rel < opts.function_tolerance:
            report.converged, report.termination_reason = True, "function_tolerance"
            break
        r, H, g, band = p.normal_equations(x)
    report.final_cost = cost
    p.x = x
    return x, report


def compute_window_errors(p: Problem) -> List[ErrorSample]:
    """Raw pseudorange errors at the current states, one sample per factor."""
    pr = p._merged()[0]
    if pr is None:
        return []
    e = p.pseudorange_errors()
    return [ErrorSample(np.array([v]), int(i), float(t)) for v, i, t in zip(e, pr.ids, pr.data["time"])]


def states_of(p: Problem):
    """(PoseState, ClockState) pairs of the current solution."""
    return [(PoseState.from_array(row[:4]), ClockState.from_array(row[4:])) for row in p.x]
