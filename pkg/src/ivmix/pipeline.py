"""Online sliding-window estimation with self-tuning pseudorange error models.

Every epoch the pipeline appends a state predicted by odometry, trims the
window, fits the pseudorange error mixture to the raw errors of the window at
the current linearization point, swaps that mixture into all pseudorange
factors and re-optimizes. The baselines (plain Gaussian, DCS, cDCE,
fixed-K mixtures) run through the same loop.
"""

from __future__ import annotations

import logging
import math
import time as _time
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .core import ClockState, OdometryMeasurement, PoseState, PseudorangeMeasurement, check_time_order
from .factors import DEFAULT_CLOCK_SQRT_INFO, clock_sqrt_info
from .mixture import (
    ComplexityConfig,
    DegenerateComponentWarning,
    GaussianMixture,
    MixtureFitError,
    VariationalPosterior,
    complexity_learning,
    complexity_learning_em,
    dump_mixture,
    em_fit,
    init_posterior,
    prior_from_errors,
    spread_mixture,
    vbi_fit,
)
from .robust import CDCEModel, DCSModel, SumMixtureModel
from .solver import Problem, SolverOptions, solve

logger = logging.getLogger(__name__)

MODELS = ("gaussian", "dcs", "cdce", "sm_em", "sm_vbi", "sm_em_cl", "ivm")
MIXTURE_MODELS = ("sm_em", "sm_vbi", "sm_em_cl", "ivm")
VBI_MODELS = ("sm_vbi", "ivm")
ODOMETRY_TIME_TOL = 1e-6


class InitializationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    model: str = "ivm"
    window_span: float = 60.0
    k_fixed: int = 3
    complexity: ComplexityConfig = ComplexityConfig()
    nu0: int = 2
    beta0: float = 1e-6
    dcs_phi: float = 1.0
    cdce_sigma: float = 1.0
    # iteration cap for the EM based selectors, per epoch
    em_max_iter: int = 200
    clock_sqrt_info: tuple = (10.0, 10.0)
    # weak prior holding the oldest window state at its current estimate
    anchor_sqrt_info: float = 1e-3
    # The Sum-Mixture cost has a positive floor per factor, so LM converges
    # linearly near the optimum. A window cost is a few hundred, hence 1e-5
    # stops once the cost moves by ~0.005, far below one sigma (0.5).
    solver: SolverOptions = field(default_factory=lambda: SolverOptions(function_tolerance=1e-5))

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}; expected one of {', '.join(MODELS)}")
        if not self.window_span > 0:
            raise ValueError("window_span must be positive")
        if self.k_fixed < 1:
            raise ValueError("k_fixed must be at least 1")
        if self.nu0 < 1 or not self.beta0 > 0:
            raise ValueError("invalid mixture prior seeds")
        if not self.anchor_sqrt_info > 0 or len(self.clock_sqrt_info) != 2:
            raise ValueError("invalid factor weights")


@dataclass
class EpochResult:
    time: float
    pose: PoseState
    clock: ClockState
    mixture: Optional[GaussianMixture]
    runtime: float

    @property
    def n_components(self) -> int:
        return 0 if self.mixture is None else self.mixture.n_components


def _odometry_sqrt_info(info: np.ndarray) -> np.ndarray:
    # upper factor S with S^T S = info
    return np.linalg.cholesky(info).T


def _gaussian_sqrt(std: np.ndarray) -> np.ndarray:
    return 1.0 / std


class Pipeline:
    """Sliding window state, factors and the current pseudorange error model."""

    def __init__(self, cfg: PipelineConfig = PipelineConfig()):
        self.cfg = cfg
        self.times: List[float] = []
        self.x = np.zeros((0, 6))
        self._pr: List[tuple] = []  # per epoch: (sat (n,3), ranges (n,), std (n,))
        self._odo: List[Optional[tuple]] = []  # per transition k -> k+1: (meas (4,), sqrt (4,4)) or None
        self.mixture: Optional[GaussianMixture] = None
        self.posterior: Optional[VariationalPosterior] = None
        self.fit_failures = 0
        self._clk_base = np.diag(np.asarray(cfg.clock_sqrt_info, dtype=float))

    @property
    def initialized(self) -> bool:
        return bool(self.times)

    # -- problem assembly -----------------------------------------------

    def _problem(self, robust: bool = True) -> Problem:
        p = Problem(self.times, self.x[:, :4], self.x[:, 4:])
        sats, ranges, stds, idx = [], [], [], []
        for k, (s, r, sd) in enumerate(self._pr):
            sats.append(s)
            ranges.append(r)
            stds.append(sd)
            idx.append(np.full(len(r), k))
        p.add_pseudoranges(np.concatenate(idx), np.concatenate(sats), np.concatenate(ranges), np.concatenate(stds))
        odo_idx = [k for k, o in enumerate(self._odo) if o is not None]
        if odo_idx:
            p.add_odometry(odo_idx, np.stack([self._odo[k][0] for k in odo_idx]),
                           np.stack([self._odo[k][1] for k in odo_idx]))
        if len(self.times) > 1:
            dt = np.diff(self.times)
            p.add_clock(np.arange(len(dt)), dt, clock_sqrt_info(dt, self._clk_base))
        p.add_prior(0, self.x[0], self.cfg.anchor_sqrt_info * np.eye(6))
        if robust:
            self._attach_model(p)
        return p

    def _attach_model(self, p: Problem) -> None:
        p.pseudorange_model = self._robust_model(np.concatenate([sd for _, _, sd in self._pr]))

    def _robust_model(self, std):
        model = self.cfg.model
        if model == "gaussian":
            return None
        if model == "dcs":
            return DCSModel(0.0, _gaussian_sqrt(std), phi=self.cfg.dcs_phi)
        if model == "cdce":
            return CDCEModel(0.0, _gaussian_sqrt(std), sigma=self.cfg.cdce_sigma)
        if self.mixture is None:
            return None
        return SumMixtureModel(self.mixture)

    # -- mixture estimation ---------------------------------------------

    def _fit_mixture(self, e: np.ndarray, first: bool = False) -> None:
        cfg = self.cfg
        model = cfg.model
        if model not in MIXTURE_MODELS:
            return
        samples = e[:, None]
        priors = prior_from_errors(samples, cfg.nu0, cfg.beta0)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DegenerateComponentWarning)
                if model == "ivm":
                    post = self.posterior if self.posterior is not None else None
                    self.posterior = complexity_learning(samples, post, priors, cfg.complexity)
                    self.mixture = self.posterior.expected_mixture()
                elif model == "sm_vbi":
                    k = min(cfg.k_fixed, len(e))
                    start = init_posterior(samples, k, priors) if self.posterior is None else self.posterior
                    self.posterior = vbi_fit(samples, start, priors, cfg.complexity)
                    self.mixture = self.posterior.expected_mixture()
                elif model == "sm_em":
                    k = min(cfg.k_fixed, len(e))
                    start = spread_mixture(samples, k) if self.mixture is None else self.mixture
                    self.mixture = em_fit(samples, start.n_components, start, max_iter=cfg.em_max_iter,
                                          tol=cfg.complexity.dL_min)
                else:
                    self.mixture = complexity_learning_em(samples, self.mixture, priors, cfg.complexity,
                                                          max_iter=cfg.em_max_iter)
        except (MixtureFitError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            self.fit_failures += 1
            if first or self.mixture is None:
                raise
            logger.warning("mixture fit failed (%s); keeping the previous model", exc)
            warnings.warn(f"mixture fit failed ({exc}); keeping the previous model", RuntimeWarning, stacklevel=3)

    # -- public API -----------------------------------------------------

    def initialize(self, t0: float, pseudoranges: Sequence[PseudorangeMeasurement]) -> EpochResult:
        """Gaussian least-squares fix of the first epoch, then the initial error model."""
        start = _time.perf_counter()
        if self.initialized:
            raise InitializationError("pipeline already initialized")
        if len(pseudoranges) < 4:
            raise InitializationError(
                f"need at least 4 pseudoranges at the first epoch t={t0}, got {len(pseudoranges)}"
            )
        self.times = [float(t0)]
        self.x = np.zeros((1, 6))
        self._pr = [self._pack(pseudoranges)]
        self._odo = []
        p = self._problem(robust=False)
        self.x, _ = solve(p, self.cfg.solver)
        if self.cfg.model in MIXTURE_MODELS:
            e = p.pseudorange_errors()
            self._fit_mixture(e, first=True)
            if self.cfg.model in ("ivm", "sm_em_cl"):
                # the second learning pass
                self._fit_mixture(e, first=True)
        return self._result(start)

    @staticmethod
    def _pack(prs: Sequence[PseudorangeMeasurement]) -> tuple:
        return (
            np.array([m.sat_pos for m in prs], dtype=float),
            np.array([m.range for m in prs], dtype=float),
            np.array([m.nominal_std for m in prs], dtype=float),
        )

    def step(self, t: float, pseudoranges: Sequence[PseudorangeMeasurement],
             odometry: Optional[OdometryMeasurement] = None) -> EpochResult:
        """Process one epoch; ``odometry`` spans from the previous epoch to ``t``."""
        start = _time.perf_counter()
        if not self.initialized:
            raise InitializationError("step called before initialize")
        t = float(t)
        if t <= self.times[-1]:
            raise ValueError(f"epoch time {t} not after the last epoch {self.times[-1]}")
        if not pseudoranges:
            raise ValueError(f"epoch t={t} has no pseudoranges")
        dt = t - self.times[-1]
        prev = self.x[-1]
        new = prev.copy()
        if odometry is not None:
            c, s = math.cos(prev[3]), math.sin(prev[3])
            new[0] += c * odometry.forward - s * odometry.lateral
            new[1] += s * odometry.forward + c * odometry.lateral
            new[2] += odometry.vertical
            new[3] = math.remainder(prev[3] + odometry.dyaw, 2 * math.pi)
            self._odo.append((odometry.as_array(), _odometry_sqrt_info(odometry.info)))
        else:
            self._odo.append(None)
        new[4] = prev[4] + prev[5] * dt
        self.times.append(t)
        self.x = np.vstack([self.x, new])
        self._pr.append(self._pack(pseudoranges))

        # trim everything older than the span
        cutoff = t - self.cfg.window_span
        drop = 0
        while self.times[drop] < cutoff:
            drop += 1
        if drop:
            self.times = self.times[drop:]
            self.x = self.x[drop:]
            self._pr = self._pr[drop:]
            self._odo = self._odo[drop:]

        p = self._problem(robust=False)
        if self.cfg.model in MIXTURE_MODELS:
            self._fit_mixture(p.pseudorange_errors())
        # the model is swapped only here, between solver runs
        self._attach_model(p)
        self.x, _ = solve(p, self.cfg.solver)
        return self._result(start)

    def _result(self, start: float) -> EpochResult:
        row = self.x[-1]
        return EpochResult(self.times[-1], PoseState.from_array(row[:4]), ClockState.from_array(row[4:]),
                           self.mixture, _time.perf_counter() - start)


def epochs_of(records: Sequence) -> List[tuple]:
    """Group a time-ordered stream into ``(t, pseudoranges, odometry-or-None)`` epochs.

    Epochs are the distinct pseudorange timestamps. An odometry record
    stamped ``s`` with duration ``dt`` belongs to the epoch at ``s + dt`` and
    is only used when ``s`` is the preceding epoch; other records are dropped.
    Records of other types (e.g. ground truth) are ignored.
    """
    check_time_order(records)
    prs = {}
    odos = []
    for r in records:
        if isinstance(r, PseudorangeMeasurement):
            prs.setdefault(r.time, []).append(r)
        elif isinstance(r, OdometryMeasurement):
            odos.append(r)
    times = sorted(prs)
    out = []
    by_start = {}
    for o in odos:
        by_start.setdefault(o.time, o)
    for i, t in enumerate(times):
        odo = None
        if i > 0:
            cand = by_start.get(times[i - 1])
            if cand is not None and abs(cand.time + cand.dt - t) <= ODOMETRY_TIME_TOL:
                odo = cand
            elif cand is not None:
                logger.warning("odometry at t=%s does not end at the next epoch t=%s; dropped", cand.time, t)
        out.append((t, prs[t], odo))
    return out


def run(records: Sequence, cfg: PipelineConfig = PipelineConfig()) -> List[EpochResult]:
    """Process a whole stream causally; an empty stream gives an empty result."""
    epochs = epochs_of(records)
    pipe = Pipeline(cfg)
    out = []
    for t, prs, odo in epochs:
        if not pipe.initialized:
            out.append(pipe.initialize(t, prs))
        else:
            out.append(pipe.step(t, prs, odo))
    return out


CSV_HEADER = "time,x,y,z,phi,delta,delta_dot,K,runtime_s"


def results_csv(results: Sequence[EpochResult]) -> str:
    lines = [CSV_HEADER]
    for r in results:
        vals = [r.time, r.pose.x, r.pose.y, r.pose.z, r.pose.phi, r.clock.delta, r.clock.delta_dot]
        lines.append(",".join(repr(float(v)) for v in vals) + f",{r.n_components},{r.runtime!r}")
    return "\n".join(lines) + "\n"


def parse_results_csv(text: str) -> np.ndarray:
    """Columns of a results CSV as a float array (header checked)."""
    lines = [l for l in text.splitlines() if l.strip()]
    if not lines or lines[0].strip() != CSV_HEADER:
        raise ValueError("not a results CSV (header mismatch)")
    return np.array([[float(v) for v in l.split(",")] for l in lines[1:]]).reshape(-1, 9)


def mixture_trace(results: Sequence[EpochResult]) -> str:
    """Serialized mixture per epoch, each block introduced by ``epoch <time>``."""
    parts = []
    for r in results:
        parts.append(f"epoch {r.time!r}\n")
        parts.append("none\n" if r.mixture is None else dump_mixture(r.mixture))
    return "".join(parts)


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------

_PIPELINE_KEYS = {
    "model": str, "window_span": float, "k_fixed": int, "nu0": int, "beta0": float,
    "dcs_phi": float, "cdce_sigma": float, "em_max_iter": int, "anchor_sqrt_info": float,
}
_COMPLEXITY_KEYS = {"k_max": int, "i_max": int, "dL_min": float, "w_min": float, "convergence": str}
_SOLVER_KEYS = {
    "lambda_init": float, "function_tolerance": float, "gradient_tolerance": float,
    "max_iterations": int, "max_consecutive_rejections": int,
}


def _section(cp, name, keys, bool_keys=()):
    out = {}
    if not cp.has_section(name):
        return out
    for k, v in cp[name].items():
        if k in bool_keys:
            out[k] = cp[name].getboolean(k)
        elif k in keys:
            out[k] = keys[k](v)
        else:
            raise ValueError(f"unknown key {k!r} in [{name}]")
    return out


def load_config(text: str, **overrides) -> PipelineConfig:
    """Parse an INI config with optional [pipeline], [complexity] and [solver] sections.

    Keys mirror the PipelineConfig, ComplexityConfig and SolverOptions fields;
    ``clock_sqrt_info`` is two comma-separated numbers. Keyword overrides win.
    """
    import configparser

    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read_string(text)
    unknown = set(cp.sections()) - {"pipeline", "complexity", "solver"}
    if unknown:
        raise ValueError(f"unknown config sections: {', '.join(sorted(unknown))}")
    pipe = _section(cp, "pipeline", {**_PIPELINE_KEYS, "clock_sqrt_info": lambda v: tuple(float(x) for x in v.split(","))})
    cx = _section(cp, "complexity", _COMPLEXITY_KEYS, bool_keys=("prune", "recompute_prior"))
    so = _section(cp, "solver", _SOLVER_KEYS)
    base = PipelineConfig()
    solver = SolverOptions(**{**base.solver.__dict__, **so})
    return PipelineConfig(**{**pipe, "complexity": ComplexityConfig(**cx), "solver": solver, **overrides})
