"""Gaussian mixtures over residual space and their online estimation.

Three estimators live here:

* :func:`em_fit` -- maximum-likelihood EM with a covariance floor.
* :func:`vbi_fit` -- variational Bayes with Normal/Wishart priors on the
  component means and information matrices and *no* Dirichlet prior on the
  weights, so that unused components can be driven to zero weight and removed.
* :func:`complexity_learning` -- the add-one/fit/prune loop that lets the
  number of components follow the data over time.

Information matrices use the convention ``E[I] = nu * inv(V)`` throughout.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import digamma, gammaln, logsumexp

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
EM_VARIANCE_FLOOR = 1e-6
PRIOR_VARIANCE_FLOOR = 1e-4
DEFAULT_BETA0 = 1e-6
DEFAULT_NU0 = 2


class MixtureFitError(RuntimeError):
    """Raised when a mixture cannot be estimated from the given samples."""


class DegenerateComponentWarning(RuntimeWarning):
    pass


def _as_samples(samples, dim: Optional[int] = None) -> np.ndarray:
    e = np.asarray(samples, dtype=float)
    if e.ndim == 1:
        e = e[:, None] if dim in (None, 1) else e[None, :]
    if e.ndim != 2:
        raise ValueError("samples must be an (N,) or (N, D) array")
    if dim is not None and e.shape[1] != dim:
        raise ValueError(f"sample dimension {e.shape[1]} does not match mixture dimension {dim}")
    if not np.all(np.isfinite(e)):
        raise ValueError("samples must be finite")
    return e


def sqrt_info_from_info(info: np.ndarray) -> np.ndarray:
    """Upper-triangular R with R.T @ R == info (batched over leading axes)."""
    return np.swapaxes(np.linalg.cholesky(info), -1, -2)


def _spd_inverse(a: np.ndarray) -> np.ndarray:
    return np.linalg.inv(a)


@dataclass(frozen=True)
class GaussianComponent:
    weight: float
    mean: np.ndarray
    sqrt_info: np.ndarray

    @property
    def info(self) -> np.ndarray:
        return self.sqrt_info.T @ self.sqrt_info


@dataclass(frozen=True)
class GaussianMixture:
    """K weighted Gaussian components in D dimensions, stored as stacked arrays.

    ``weights`` is (K,), ``means`` is (K, D) and ``sqrt_info`` is (K, D, D)
    with upper-triangular blocks.
    """

    weights: np.ndarray
    means: np.ndarray
    sqrt_info: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(-1)
        mu = np.array(self.means, dtype=float)
        if mu.ndim == 1:
            mu = mu[:, None]
        r = np.array(self.sqrt_info, dtype=float)
        if r.ndim == 1:
            r = r[:, None, None]
        k, d = mu.shape
        if k < 1:
            raise ValueError("a mixture needs at least one component")
        if w.shape != (k,) or r.shape != (k, d, d):
            raise ValueError(f"inconsistent shapes: weights {w.shape}, means {mu.shape}, sqrt_info {r.shape}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1, got {w.sum()!r}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(r))):
            raise ValueError("means and sqrt_info must be finite")
        if np.any(np.tril(r, -1) != 0):
            raise ValueError("sqrt_info must be upper triangular")
        if np.any(np.abs(np.diagonal(r, axis1=1, axis2=2)) <= 0):
            raise ValueError("sqrt_info must be non-singular")
        for arr in (w, mu, r):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "sqrt_info", r)

    @classmethod
    def from_info(cls, weights, means, info) -> "GaussianMixture":
        info = np.asarray(info, dtype=float)
        if info.ndim == 1:
            info = info[:, None, None]
        return cls(weights, means, sqrt_info_from_info(info))

    @classmethod
    def from_components(cls, components: Sequence[GaussianComponent]) -> "GaussianMixture":
        return cls(
            [c.weight for c in components],
            np.stack([np.atleast_1d(c.mean) for c in components]),
            np.stack([np.atleast_2d(c.sqrt_info) for c in components]),
        )

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def info(self) -> np.ndarray:
        return np.swapaxes(self.sqrt_info, 1, 2) @ self.sqrt_info

    @property
    def covariances(self) -> np.ndarray:
        return _spd_inverse(self.info)

    @property
    def components(self) -> List[GaussianComponent]:
        return [GaussianComponent(float(w), m, r) for w, m, r in zip(self.weights, self.means, self.sqrt_info)]

    def log_scales(self) -> np.ndarray:
        """ln c_k = ln w_k + ln det(sqrt_info_k); -inf for zero weights."""
        logdet = np.sum(np.log(np.abs(np.diagonal(self.sqrt_info, axis1=1, axis2=2))), axis=1)
        with np.errstate(divide="ignore"):
            return np.log(self.weights) + logdet

    def mahalanobis(self, e: np.ndarray) -> np.ndarray:
        """Squared whitened distances ||R_k (e_n - mu_k)||^2, shape (N, K)."""
        if self.sqrt_info.shape[1] == 1:
            # computed as (K, N) and returned transposed: reductions over the short K axis
            # of a (K, N) buffer are much faster than over the last axis of (N, K)
            return ((self.sqrt_info[:, 0, :] * (e[:, 0][None, :] - self.means[:, :1])) ** 2).T
        diff = e[:, None, :] - self.means[None, :, :]
        white = np.einsum("kij,nkj->nki", self.sqrt_info, diff)
        return np.einsum("nki,nki->nk", white, white)

    def log_kernel_terms(self, e: np.ndarray) -> np.ndarray:
        """ln(c_k) - q_k/2, the log of each unnormalized kernel term, shape (N, K)."""
        q = self.mahalanobis(e).T
        return (self.log_scales()[:, None] - 0.5 * q).T

    def log_density(self, samples) -> np.ndarray:
        e = _as_samples(samples, self.dim)
        return logsumexp(self.log_kernel_terms(e), axis=1) - 0.5 * self.dim * LOG_2PI

    def log_likelihood(self, samples) -> float:
        return float(np.sum(self.log_density(samples)))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        labels = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        # x = mu + R^-1 z gives covariance (R^T R)^-1
        out = np.empty((n, self.dim))
        for k in range(self.n_components):
            sel = labels == k
            out[sel] = self.means[k] + np.linalg.solve(self.sqrt_info[k], z[sel].T).T
        return out


def mixture_density(gmm: GaussianMixture, e) -> float:
    """Normalized mixture pdf at a single point ``e``."""
    e = np.atleast_1d(np.asarray(e, dtype=float))
    if e.shape != (gmm.dim,):
        raise ValueError(f"point has shape {e.shape}, mixture dimension is {gmm.dim}")
    return float(np.exp(gmm.log_density(e[None, :])[0]))


def mixture_normalizer(gmm: GaussianMixture) -> float:
    """gamma = sum_k w_k det(sqrt_info_k), the supremum of the mixture kernel."""
    return float(np.sum(np.exp(gmm.log_scales())))


# ---------------------------------------------------------------------------
# Expectation maximization
# ---------------------------------------------------------------------------


def _responsibilities(gmm: GaussianMixture, e: np.ndarray):
    log_terms = gmm.log_kernel_terms(e)
    log_norm = logsumexp(log_terms, axis=1, keepdims=True)
    resp = np.exp(log_terms - log_norm)
    loglik = float(np.sum(log_norm)) - 0.5 * e.shape[0] * gmm.dim * LOG_2PI
    return resp, loglik


def _floor_covariance(cov: np.ndarray, floor: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals, floor)
    return (vecs * vals[..., None, :]) @ np.swapaxes(vecs, -1, -2)


def em_step(gmm: GaussianMixture, e: np.ndarray, variance_floor: float = EM_VARIANCE_FLOOR):
    """One E+M step. Returns (new mixture, log-likelihood of ``gmm``, any floor hit)."""
    resp, loglik = _responsibilities(gmm, e)
    nk = resp.sum(axis=0)
    n = e.shape[0]
    degenerate = nk < 1e-10
    safe_nk = np.where(degenerate, 1.0, nk)
    means = (resp.T @ e) / safe_nk[:, None]
    means = np.where(degenerate[:, None], gmm.means, means)
    diff = e[:, None, :] - means[None, :, :]
    cov = np.einsum("nk,nki,nkj->kij", resp, diff, diff) / safe_nk[:, None, None]
    d = e.shape[1]
    cov = np.where(degenerate[:, None, None], variance_floor * np.eye(d), cov)
    floored = _floor_covariance(cov, variance_floor)
    hit = bool(np.any(degenerate) or np.any(np.linalg.eigvalsh(cov) < variance_floor))
    weights = nk / n
    weights = weights / weights.sum()
    new = GaussianMixture(weights, means, sqrt_info_from_info(_spd_inverse(floored)))
    return new, loglik, hit


def em_fit(
    samples,
    K: int,
    init: GaussianMixture,
    max_iter: int = 200,
    tol: float = 1e-10,
    variance_floor: float = EM_VARIANCE_FLOOR,
    trace: Optional[list] = None,
) -> GaussianMixture:
    """Fit a K-component mixture by EM starting from ``init``.

    Iterates until the relative log-likelihood change drops below ``tol`` or
    ``max_iter`` steps were taken. Component covariances are clamped from
    below at ``variance_floor`` (eigenvalue-wise). If ``trace`` is a list, the
    log-likelihood before every step and after the last one is appended.
    """
    e = _as_samples(samples, init.dim)
    if e.shape[0] == 0:
        raise ValueError("em_fit needs at least one sample")
    if init.n_components != K:
        raise ValueError(f"init has {init.n_components} components, expected {K}")
    if e.shape[0] < K:
        raise ValueError(f"need at least K={K} samples, got {e.shape[0]}")
    gmm = init
    prev = None
    floor_hit = False
    for _ in range(max_iter):
        gmm_next, loglik, hit = em_step(gmm, e, variance_floor)
        floor_hit |= hit
        if trace is not None:
            trace.append(loglik)
        gmm = gmm_next
        if prev is not None and abs(loglik - prev) <= tol * max(abs(prev), 1.0):
            break
        prev = loglik
    if trace is not None:
        trace.append(gmm.log_likelihood(e))
    if floor_hit:
        warnings.warn("EM component covariance hit the variance floor", DegenerateComponentWarning, stacklevel=2)
    return gmm


def spread_mixture(samples, K: int, spread: float = 10.0) -> GaussianMixture:
    """Zero-mean starting mixture whose standard deviations grow geometrically.

    The first component has the sample standard deviation divided by
    ``spread**((K-1)/2)``, so the components bracket the empirical scale.
    Different widths break the symmetry that identical components would have.
    """
    e = _as_samples(samples)
    d = e.shape[1]
    var = np.maximum(np.var(e, axis=0), PRIOR_VARIANCE_FLOOR) if e.shape[0] > 1 else np.ones(d)
    exps = np.arange(K) - (K - 1) / 2.0
    scales = spread ** (2.0 * exps)
    info = np.stack([np.diag(1.0 / (var * s)) for s in scales])
    return GaussianMixture.from_info(np.full(K, 1.0 / K), np.zeros((K, d)), info)


# ---------------------------------------------------------------------------
# Variational Bayes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MixturePriors:
    """Normal prior on means (information beta0*I) and Wishart(V0, nu0) on information."""

    beta0: float
    V0: np.ndarray
    nu0: int

    def __post_init__(self):
        v0 = np.atleast_2d(np.asarray(self.V0, dtype=float))
        if not self.beta0 > 0:
            raise ValueError("beta0 must be positive")
        if v0.shape[0] != v0.shape[1] or not np.allclose(v0, v0.T):
            raise ValueError("V0 must be a symmetric matrix")
        try:
            np.linalg.cholesky(v0)
        except np.linalg.LinAlgError:
            raise ValueError("V0 must be positive definite") from None
        if self.nu0 < v0.shape[0]:
            raise ValueError(f"nu0={self.nu0} must be at least the dimension {v0.shape[0]}")
        v0.setflags(write=False)
        object.__setattr__(self, "V0", v0)

    @property
    def dim(self) -> int:
        return self.V0.shape[0]


@dataclass(frozen=True)
class ComplexityConfig:
    k_max: int = 8
    i_max: int = 1000
    dL_min: float = 1e-6
    # None means 1/N, recomputed from the current sample count
    w_min: Optional[float] = None
    recompute_prior: bool = True
    prune: bool = True
    convergence: str = "bound"

    def __post_init__(self):
        if self.k_max < 1 or self.i_max < 1 or not self.dL_min > 0:
            raise ValueError("invalid ComplexityConfig")
        if self.convergence not in ("bound", "likelihood"):
            raise ValueError(f"unknown convergence measure {self.convergence!r}")

    def prune_threshold(self, n: int) -> float:
        return 1.0 / n if self.w_min is None else self.w_min


@dataclass
class VariationalPosterior:
    """Factorized posterior q(I) q(mu) q(s) plus point-estimated weights.

    Per component k: mean factor N(m_k, inv(Lambda_k)), information factor
    Wishart(V_k, nu_k) with E[I_k] = nu_k inv(V_k), weight w_k.
    ``resp`` holds the last (N, K) responsibility matrix, or None if the
    posterior has not seen data yet.
    """

    m: np.ndarray
    Lambda: np.ndarray
    nu: np.ndarray
    V: np.ndarray
    w: np.ndarray
    resp: Optional[np.ndarray] = None
    n_k: Optional[np.ndarray] = None

    @property
    def n_components(self) -> int:
        return int(self.w.shape[0])

    @property
    def dim(self) -> int:
        return int(self.m.shape[1]) if self.m.ndim == 2 else 0

    @classmethod
    def empty(cls, dim: int = 1) -> "VariationalPosterior":
        return cls(np.zeros((0, dim)), np.zeros((0, dim, dim)), np.zeros(0), np.zeros((0, dim, dim)), np.zeros(0))

    def copy(self) -> "VariationalPosterior":
        return VariationalPosterior(
            self.m.copy(), self.Lambda.copy(), self.nu.copy(), self.V.copy(), self.w.copy(),
            None if self.resp is None else self.resp.copy(),
            None if self.n_k is None else self.n_k.copy(),
        )

    def expected_info(self) -> np.ndarray:
        return wishart_expectation(self.nu, self.V)

    def expected_mixture(self) -> GaussianMixture:
        """Mixture with means m_k, information nu_k inv(V_k) and weights w_k."""
        return GaussianMixture.from_info(self.w, self.m, self.expected_info())

    def select(self, keep: np.ndarray) -> "VariationalPosterior":
        keep = np.asarray(keep)
        w = self.w[keep]
        w = w / w.sum()
        resp = None
        if self.resp is not None:
            resp = self.resp[:, keep]
            rs = resp.sum(axis=1, keepdims=True)
            resp = np.divide(resp, rs, out=np.full_like(resp, 1.0 / max(len(w), 1)), where=rs > 0)
        n_k = None if self.n_k is None else self.n_k[keep]
        return VariationalPosterior(self.m[keep], self.Lambda[keep], self.nu[keep], self.V[keep], w, resp, n_k)


def wishart_expectation(nu, V) -> np.ndarray:
    """E[I] = nu * inv(V); accepts a single (D, D) V or a stack (K, D, D)."""
    V = np.asarray(V, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if V.ndim == 0:
        V = V.reshape(1, 1)
    if V.ndim < 2 or V.shape[-1] != V.shape[-2]:
        raise ValueError("V must be square")
    if np.any(nu < V.shape[-1]):
        raise ValueError("nu must be at least the dimension")
    if np.any(np.linalg.det(V) <= 0):
        raise ValueError("V must be positive definite (non-singular)")
    return nu[..., None, None] * _spd_inverse(V)


def wishart_expected_logdet(nu, V) -> np.ndarray:
    """E[ln det I] = sum_d psi((nu+1-d)/2) + D ln 2 - ln det V."""
    V = np.asarray(V, dtype=float)
    nu = np.asarray(nu, dtype=float)
    d = V.shape[-1]
    dims = np.arange(1, d + 1)
    psi = digamma((nu[..., None] + 1.0 - dims) / 2.0).sum(axis=-1)
    return psi + d * math.log(2.0) - np.linalg.slogdet(V)[1]


def prior_from_errors(samples, nu0: int = DEFAULT_NU0, beta0: float = DEFAULT_BETA0,
                      variance_floor: float = PRIOR_VARIANCE_FLOOR) -> MixturePriors:
    """Wishart scale from the empirical error variance: V0 = var(e) / nu0."""
    e = _as_samples(samples)
    if e.shape[0] < 2:
        raise ValueError("need at least two error samples to estimate a variance")
    var = np.maximum(np.var(e, axis=0, ddof=1), variance_floor * nu0)
    return MixturePriors(beta0, np.diag(var / nu0), nu0)


def prior_component_info(priors: MixturePriors) -> np.ndarray:
    """Information matrix of a freshly initialized component, nu0 inv(V0)."""
    return wishart_expectation(priors.nu0, priors.V0)


def add_component(posterior: VariationalPosterior, priors: MixturePriors) -> VariationalPosterior:
    """Append a zero-mean component drawn from the prior.

    The newcomer gets weight 1/(K+1) and the existing weights are scaled by
    K/(K+1). Its mean factor carries the prior information plus that of one
    pseudo-observation at the prior expected information; with the bare prior
    information beta0 the mean uncertainty would be so large that the new
    component could never win any responsibility.
    """
    d = priors.dim
    k = posterior.n_components
    if k and posterior.dim != d:
        raise ValueError("prior dimension does not match posterior")
    info0 = prior_component_info(priors)
    lam = priors.beta0 * np.eye(d) + info0
    w = np.append(posterior.w * (k / (k + 1.0)), 1.0 / (k + 1.0)) if k else np.ones(1)
    resp = None
    if posterior.resp is not None and k:
        resp = np.hstack([posterior.resp * (k / (k + 1.0)), np.full((posterior.resp.shape[0], 1), 1.0 / (k + 1.0))])
    n_k = None if posterior.n_k is None else np.append(posterior.n_k, 0.0)
    return VariationalPosterior(
        np.vstack([posterior.m.reshape(k, d), np.zeros((1, d))]),
        np.concatenate([posterior.Lambda.reshape(k, d, d), lam[None]]),
        np.append(posterior.nu, float(priors.nu0)),
        np.concatenate([posterior.V.reshape(k, d, d), priors.V0[None]]),
        w,
        resp,
        n_k,
    )


def init_posterior(samples, K: int, priors: MixturePriors, spread: float = 100.0) -> VariationalPosterior:
    """K zero-mean components with geometrically spread expected information.

    Component j has E[I_j] equal to the :func:`spread_mixture` information,
    expressed through nu0 and a rescaled V0, and a mean factor with one
    pseudo-observation, like components created by :func:`add_component`.
    The wide default spread matters: components of similar width share the
    data and settle in local optima instead of being pruned.
    """
    gmm = spread_mixture(samples, K, spread)
    d = priors.dim
    info = gmm.info
    V = priors.nu0 * _spd_inverse(info)
    lam = priors.beta0 * np.eye(d)[None] + info
    return VariationalPosterior(
        np.zeros((K, d)), lam, np.full(K, float(priors.nu0)), V, np.full(K, 1.0 / K)
    )


def _multigammaln(a: np.ndarray, d: int) -> np.ndarray:
    j = np.arange(1, d + 1)
    return d * (d - 1) / 4.0 * math.log(math.pi) + gammaln(a[..., None] + (1.0 - j) / 2.0).sum(axis=-1)


def _multidigamma(a: np.ndarray, d: int) -> np.ndarray:
    j = np.arange(1, d + 1)
    return digamma(a[..., None] + (1.0 - j) / 2.0).sum(axis=-1)


def _log_rho(e: np.ndarray, post: VariationalPosterior) -> np.ndarray:
    """Unnormalized log responsibilities, shape (N, K).

    ln rho_nk = ln w_k + E[ln det I_k]/2 - D/2 ln 2pi
                - ((e_n - m_k)^T E[I_k] (e_n - m_k) + tr(E[I_k] inv(Lambda_k))) / 2
    """
    d = e.shape[1]
    with np.errstate(divide="ignore"):
        log_w = np.log(post.w)
    if d == 1:
        v = post.V[:, 0, 0]
        e_info = post.nu / v
        e_logdet = digamma(0.5 * post.nu) + math.log(2.0) - np.log(v)
        trace = e_info / post.Lambda[:, 0, 0]
        const = log_w + 0.5 * e_logdet - 0.5 * LOG_2PI - 0.5 * trace
        # (K, N) buffer returned as an (N, K) view, see GaussianMixture.mahalanobis
        return (const[:, None] - 0.5 * e_info[:, None] * (e[:, 0][None, :] - post.m[:, :1]) ** 2).T
    else:
        e_info = post.expected_info()
        e_logdet = wishart_expected_logdet(post.nu, post.V)
        diff = e[:, None, :] - post.m[None, :, :]
        quad = np.einsum("nki,kij,nkj->nk", diff, e_info, diff)
        trace = np.einsum("kij,kji->k", e_info, _spd_inverse(post.Lambda))
    return (log_w + 0.5 * e_logdet - 0.5 * d * LOG_2PI - 0.5 * trace) - 0.5 * quad


def _normalize_log(log_rho: np.ndarray):
    """Responsibilities and their logarithms from unnormalized log responsibilities."""
    shifted = log_rho - log_rho.max(axis=1, keepdims=True)
    p = np.exp(shifted)
    s = p.sum(axis=1, keepdims=True)
    return p / s, shifted - np.log(s)


def vbi_responsibilities(e, post: VariationalPosterior) -> np.ndarray:
    """Normalized responsibilities r_nk = rho_nk / sum_j rho_nj."""
    e = _as_samples(e, post.dim)
    return _normalize_log(_log_rho(e, post))[0]


def _update_factors(e: np.ndarray, resp: np.ndarray, post: VariationalPosterior,
                    priors: MixturePriors) -> VariationalPosterior:
    """Mean factors, then information factors (using the new means), then weights."""
    n, d = e.shape
    n_k = resp.sum(axis=0)
    if d == 1:
        e_info = post.nu / post.V[:, 0, 0]
        lam = priors.beta0 + n_k * e_info
        m = e_info * (e[:, 0] @ resp) / lam
        scatter = np.einsum("nk,nk->k", resp, (e - m) ** 2)
        v = priors.V0[0, 0] + scatter + n_k / lam
        if np.any(v <= 0):
            raise MixtureFitError("Wishart scale lost positive definiteness")
        lam_m, m_m, v_m = lam[:, None, None], m[:, None], v[:, None, None]
    else:
        e_info = post.expected_info()
        lam_m = priors.beta0 * np.eye(d)[None] + n_k[:, None, None] * e_info
        m_m = np.linalg.solve(lam_m, np.einsum("kij,kj->ki", e_info, resp.T @ e)[..., None])[..., 0]
        diff = e[:, None, :] - m_m[None, :, :]
        scatter = np.einsum("nk,nki,nkj->kij", resp, diff, diff)
        v_m = priors.V0[None] + scatter + n_k[:, None, None] * _spd_inverse(lam_m)
        v_m = 0.5 * (v_m + np.swapaxes(v_m, 1, 2))
        if np.any(np.linalg.eigvalsh(v_m)[:, 0] <= 0):
            raise MixtureFitError("Wishart scale matrix lost positive definiteness")
    return VariationalPosterior(m_m, lam_m, priors.nu0 + n_k, v_m, n_k / n, resp, n_k)


def _kl_terms(post: VariationalPosterior, priors: MixturePriors) -> float:
    """Sum over components of KL(q(mu_k) || p(mu)) + KL(q(I_k) || p(I))."""
    d = priors.dim
    beta0, nu0 = priors.beta0, float(priors.nu0)
    nu = post.nu
    if d == 1:
        lam = post.Lambda[:, 0, 0]
        kl_mu = 0.5 * (beta0 / lam + beta0 * post.m[:, 0] ** 2 - 1.0 + np.log(lam / beta0))
        a = priors.V0[0, 0] / post.V[:, 0, 0]
        kl_w = (-0.5 * nu0 * np.log(a) + 0.5 * nu * (a - 1.0)
                + gammaln(0.5 * nu0) - gammaln(0.5 * nu) + 0.5 * (nu - nu0) * digamma(0.5 * nu))
    else:
        lam_inv = _spd_inverse(post.Lambda)
        kl_mu = 0.5 * (beta0 * np.einsum("kii->k", lam_inv) + beta0 * np.sum(post.m ** 2, axis=1) - d
                       + np.linalg.slogdet(post.Lambda)[1] - d * math.log(beta0))
        a = priors.V0[None] @ _spd_inverse(post.V)
        kl_w = (-0.5 * nu0 * np.linalg.slogdet(a)[1] + 0.5 * nu * (np.einsum("kii->k", a) - d)
                + _multigammaln(np.asarray(0.5 * nu0), d) - _multigammaln(0.5 * nu, d)
                + 0.5 * (nu - nu0) * _multidigamma(0.5 * nu, d))
    return float(np.sum(kl_mu) + np.sum(kl_w))


def _bound(resp: np.ndarray, log_rho: np.ndarray, post: VariationalPosterior, priors: MixturePriors,
           log_resp: Optional[np.ndarray] = None) -> float:
    if log_resp is not None and np.isfinite(log_resp).all():
        data = np.sum(resp * (log_rho - log_resp))
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            data = np.where(resp > 0, resp * (log_rho - np.log(resp)), 0.0).sum()
    return float(data) - _kl_terms(post, priors)


def variational_bound(samples, post: VariationalPosterior, priors: MixturePriors) -> float:
    """Evidence lower bound of ``post`` (with its stored responsibilities) on the samples.

    Weights enter as point estimates, so the bound has no Dirichlet term.
    """
    e = _as_samples(samples, priors.dim)
    resp = post.resp if post.resp is not None else vbi_responsibilities(e, post)
    return _bound(resp, _log_rho(e, post), post, priors)


def vbi_iteration(e, post: VariationalPosterior, priors: MixturePriors) -> VariationalPosterior:
    """One cyclic update: responsibilities, mean factors, information factors, weights."""
    e = _as_samples(e, priors.dim)
    return _update_factors(e, _normalize_log(_log_rho(e, post))[0], post, priors)


def expected_log_likelihood(e, post: VariationalPosterior) -> float:
    """Sample log-likelihood under the expected-parameter mixture."""
    return post.expected_mixture().log_likelihood(e)


def _prune(post: VariationalPosterior, w_min: float) -> VariationalPosterior:
    keep = post.w >= w_min
    if not np.any(keep):
        raise MixtureFitError(
            f"all {post.n_components} components fell below the pruning threshold {w_min:g}; "
            "the priors do not match the data"
        )
    if np.all(keep):
        return post
    logger.debug("pruning %d of %d components", int((~keep).sum()), post.n_components)
    return post.select(np.flatnonzero(keep))


def vbi_fit(
    samples,
    posterior: VariationalPosterior,
    priors: MixturePriors,
    cfg: ComplexityConfig = ComplexityConfig(),
    trace: Optional[list] = None,
) -> VariationalPosterior:
    """Iterate variational updates until convergence, pruning light components.

    Stops after ``cfg.i_max`` iterations or once the relative change of the
    convergence measure falls below ``cfg.dL_min``. The measure is the
    variational lower bound by default (``cfg.convergence == "bound"``) or the
    expected-parameter log-likelihood (``"likelihood"``). After every
    iteration, components with weight below the pruning threshold (1/N by
    default) are removed and the survivors renormalized.

    If ``trace`` is a list, ``(K, measure)`` is appended after each iteration.
    """
    e = _as_samples(samples, priors.dim)
    n = e.shape[0]
    if n < 1:
        raise ValueError("vbi_fit needs at least one sample")
    if posterior.n_components < 1:
        raise ValueError("posterior has no components")
    use_bound = cfg.convergence == "bound"
    w_min = cfg.prune_threshold(n)
    post = posterior
    log_rho = _log_rho(e, post)
    prev = None if use_bound else expected_log_likelihood(e, post)
    for _ in range(cfg.i_max):
        resp, log_resp = _normalize_log(log_rho)
        post = _update_factors(e, resp, post, priors)
        if cfg.prune:
            kept = _prune(post, w_min)
            if kept is not post:
                # pruning renormalizes the responsibilities
                post, log_resp = kept, None
        log_rho = _log_rho(e, post)
        cur = _bound(post.resp, log_rho, post, priors, log_resp) if use_bound else expected_log_likelihood(e, post)
        if trace is not None:
            trace.append((post.n_components, cur))
        if prev is not None and abs(cur - prev) < cfg.dL_min * abs(prev):
            break
        prev = cur
    return post


def complexity_learning(
    samples,
    posterior_prev: Optional[VariationalPosterior],
    priors: MixturePriors,
    cfg: ComplexityConfig = ComplexityConfig(),
) -> VariationalPosterior:
    """Add one component to the previous posterior, refit, and prune.

    If the mixture already holds ``cfg.k_max`` components the lightest one is
    removed first (ties go to the most recently added). An empty or missing
    previous posterior is seeded with a single component fitted to the
    samples, so the first call estimates a two-component mixture.
    """
    e = _as_samples(samples, priors.dim)
    if posterior_prev is None or posterior_prev.n_components == 0:
        post = vbi_fit(e, init_posterior(e, 1, priors), priors, cfg)
    else:
        post = posterior_prev.copy()
    if post.n_components >= cfg.k_max:
        post = post.select(np.delete(np.arange(post.n_components), _lightest(post.w)))
    post = add_component(post, priors)
    return vbi_fit(e, post, priors, cfg)


def _lightest(w: np.ndarray) -> int:
    # argmin over the reversed order picks the highest index on ties
    return len(w) - 1 - int(np.argmin(w[::-1]))


def complexity_learning_em(
    samples,
    gmm_prev: Optional[GaussianMixture],
    priors: MixturePriors,
    cfg: ComplexityConfig = ComplexityConfig(),
    max_iter: Optional[int] = None,
) -> GaussianMixture:
    """The add/fit/prune loop with maximum-likelihood EM in place of VBI."""
    e = _as_samples(samples, priors.dim)
    n = e.shape[0]
    info0 = prior_component_info(priors)
    if gmm_prev is None:
        gmm = GaussianMixture.from_info([1.0], np.zeros((1, priors.dim)), info0[None])
        gmm = em_fit(e, 1, gmm, max_iter=cfg.i_max, tol=cfg.dL_min)
    else:
        gmm = gmm_prev
    w, mu, info = list(gmm.weights), list(gmm.means), list(gmm.info)
    if len(w) >= cfg.k_max:
        smallest = _lightest(np.asarray(w))
        del w[smallest], mu[smallest], info[smallest]
        w = list(np.asarray(w) / np.sum(w))
    k = len(w)
    w = [wi * k / (k + 1.0) for wi in w] + [1.0 / (k + 1.0)]
    mu.append(np.zeros(priors.dim))
    info.append(info0)
    gmm = GaussianMixture.from_info(np.asarray(w) / np.sum(w), np.stack(mu), np.stack(info))

    w_min = cfg.prune_threshold(n)
    prev = gmm.log_likelihood(e)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateComponentWarning)
        for _ in range(max_iter or cfg.i_max):
            gmm, _, _ = em_step(gmm, e)
            if cfg.prune and np.any(gmm.weights < w_min):
                keep = gmm.weights >= w_min
                if not np.any(keep):
                    raise MixtureFitError("all EM components fell below the pruning threshold")
                ww = gmm.weights[keep]
                gmm = GaussianMixture(ww / ww.sum(), gmm.means[keep], gmm.sqrt_info[keep])
            cur = gmm.log_likelihood(e)
            delta = abs(cur - prev) / max(abs(prev), 1e-300)
            prev = cur
            if delta < cfg.dL_min:
                break
    return gmm


# ---------------------------------------------------------------------------
# Plain-text serialization
# ---------------------------------------------------------------------------


def _fmt(values) -> str:
    return ",".join(repr(float(v)) for v in np.ravel(values))


def _parse(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(",")])


def _fields(line: str) -> dict:
    parts = line.split()
    out = {"kind": parts[0]}
    for p in parts[1:]:
        key, _, value = p.partition("=")
        out[key] = value
    return out


def dump_mixture(gmm: GaussianMixture) -> str:
    """Serialize as one header line plus one ``component`` line per component.

    ``info`` is the full information matrix and ``sqrt_info`` its upper
    triangular square root, both row-major. Floats use ``repr``; loading
    prefers ``sqrt_info`` so the arrays come back bit for bit. Hand-written
    files may give ``info`` alone.
    """
    lines = [f"mixture D={gmm.dim} K={gmm.n_components}"]
    for w, mu, info, r in zip(gmm.weights, gmm.means, gmm.info, gmm.sqrt_info):
        lines.append(f"component w={_fmt([w])} mean={_fmt(mu)} info={_fmt(info)} sqrt_info={_fmt(r)}")
    return "\n".join(lines) + "\n"


def load_mixture(text: str) -> GaussianMixture:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    head = _fields(lines[0])
    if head["kind"] != "mixture":
        raise ValueError("not a serialized mixture")
    d, k = int(head["D"]), int(head["K"])
    comps = [_fields(ln) for ln in lines[1:]]
    if len(comps) != k:
        raise ValueError(f"expected {k} components, found {len(comps)}")
    w = np.array([_parse(c["w"])[0] for c in comps])
    mu = np.stack([_parse(c["mean"]) for c in comps]).reshape(k, d)
    w = w / w.sum() if abs(w.sum() - 1) > 1e-12 else w
    if all("sqrt_info" in c for c in comps):
        return GaussianMixture(w, mu, np.stack([_parse(c["sqrt_info"]) for c in comps]).reshape(k, d, d))
    info = np.stack([_parse(c["info"]) for c in comps]).reshape(k, d, d)
    return GaussianMixture.from_info(w, mu, info)


def dump_posterior(post: VariationalPosterior) -> str:
    """Like :func:`dump_mixture` with the variational factors (m, Lambda, nu, V, w).

    Responsibilities are not written.
    """
    lines = [f"posterior D={post.dim} K={post.n_components}"]
    for k in range(post.n_components):
        lines.append(
            f"component w={_fmt([post.w[k]])} m={_fmt(post.m[k])} Lambda={_fmt(post.Lambda[k])} "
            f"nu={_fmt([post.nu[k]])} V={_fmt(post.V[k])}"
        )
    return "\n".join(lines) + "\n"


def load_posterior(text: str) -> VariationalPosterior:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    head = _fields(lines[0])
    if head["kind"] != "posterior":
        raise ValueError("not a serialized posterior")
    d, k = int(head["D"]), int(head["K"])
    comps = [_fields(ln) for ln in lines[1:]]
    if len(comps) != k:
        raise ValueError(f"expected {k} components, found {len(comps)}")
    if k == 0:
        return VariationalPosterior.empty(d)
    return VariationalPosterior(
        np.stack([_parse(c["m"]) for c in comps]).reshape(k, d),
        np.stack([_parse(c["Lambda"]) for c in comps]).reshape(k, d, d),
        np.array([_parse(c["nu"])[0] for c in comps]),
        np.stack([_parse(c["V"]) for c in comps]).reshape(k, d, d),
        np.array([_parse(c["w"])[0] for c in comps]),
    )
