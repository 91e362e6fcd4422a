"""Robust error models turning a raw factor error into least-squares residuals.

Every model works on a batch of raw errors ``e`` of shape (n, D) and returns
residuals of shape (n, R) together with their derivatives with respect to
``e`` of shape (n, R, D). The squared norm of a residual is the factor's
contribution to the cost, so a plain Gaussian residual carries the 1/sqrt(2)
of the negative log-likelihood.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Tuple

import numpy as np

from .mixture import GaussianMixture

SQRT_HALF = math.sqrt(0.5)


def _vec(e, dim=None) -> np.ndarray:
    e = np.atleast_1d(np.asarray(e, dtype=float))
    if e.ndim != 1:
        raise ValueError("expected a single error vector")
    if dim is not None and e.shape[0] != dim:
        raise ValueError(f"error has dimension {e.shape[0]}, model expects {dim}")
    return e


def gaussian_residual(e, mu, sqrt_info) -> np.ndarray:
    """(1/sqrt 2) sqrt_info (e - mu); its squared norm is the Gaussian cost."""
    e = _vec(e)
    s = np.atleast_2d(np.asarray(sqrt_info, dtype=float))
    mu = np.broadcast_to(np.asarray(mu, dtype=float), e.shape)
    if s.shape != (e.shape[0], e.shape[0]):
        raise ValueError(f"sqrt_info shape {s.shape} does not match error dimension {e.shape[0]}")
    return SQRT_HALF * (s @ (e - mu))


# ---------------------------------------------------------------------------
# Sum-Mixture
# ---------------------------------------------------------------------------


def _logsumexp(a: np.ndarray, axis=None) -> np.ndarray:
    # lean variant for finite inputs; the scipy one carries too much overhead per call
    m = np.max(a, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis) if axis is not None else out.reshape(())


def _sum_mixture_constants(gmm: GaussianMixture):
    """Per-mixture terms of the Sum-Mixture evaluation: ln c_k, ln gamma and c_k / gamma."""
    log_c = gmm.log_scales()
    log_gamma = float(_logsumexp(log_c))
    return log_c, log_gamma, np.exp(log_c - log_gamma)


def _sum_mixture_terms(gmm: GaussianMixture, e: np.ndarray, const=None):
    """Return f = -ln(L(e)/gamma) and the responsibilities pi_nk."""
    log_c, log_gamma, p = _sum_mixture_constants(gmm) if const is None else const
    # work on (K, N): reductions over the short component axis are cheap in this layout
    q = gmm.mahalanobis(e).T
    log_terms = log_c[:, None] - 0.5 * q
    top = log_terms.max(axis=0)
    log_l = np.log(np.exp(log_terms - top).sum(axis=0)) + top
    f = log_gamma - log_l
    # near f = 0 the difference above cancels; 1 - L/gamma = sum_k p_k (1 - exp(-q_k/2)) is exact there
    x = -(p @ np.expm1(-0.5 * q))
    small = x < 0.5
    f[small] = -np.log1p(-x[small])
    f = np.maximum(f, 0.0)
    pi = np.exp(log_terms - log_l)
    return f, pi.T


def sum_mixture_residual(e, gmm: GaussianMixture) -> float:
    """sqrt(-ln(L(e)/gamma)) with L(e) = sum_k c_k exp(-||R_k(e-mu_k)||^2/2), gamma = sum_k c_k."""
    e = _vec(e, gmm.dim)
    f, _ = _sum_mixture_terms(gmm, e[None, :])
    return float(math.sqrt(f[0]))


def _sum_mixture_eval(gmm: GaussianMixture, e: np.ndarray, const=None, info=None) -> Tuple[np.ndarray, np.ndarray]:
    f, pi = _sum_mixture_terms(gmm, e, const)
    r = np.sqrt(f)
    info = gmm.info if info is None else info
    # df/de = sum_k pi_k I_k (e - mu_k)
    if gmm.dim == 1:
        df = ((pi.T * info[:, 0, :]) * (e[:, 0][None, :] - gmm.means[:, :1])).sum(axis=0)[:, None]
    else:
        diff = e[:, None, :] - gmm.means[None, :, :]
        df = np.einsum("nk,kij,nkj->ni", pi, info, diff)
    dr = np.empty_like(df)
    zero = r == 0.0
    nz = ~zero
    dr[nz] = df[nz] / (2.0 * r[nz, None])
    if np.any(zero):
        # Gauss-Newton-consistent limit of the single-component case
        k = np.argmax(pi[zero], axis=1)
        dr[zero] = SQRT_HALF * gmm.sqrt_info[k, 0, :]
    return r[:, None], dr[:, None, :]


def sum_mixture_jacobian(e, de_dx, gmm: GaussianMixture) -> np.ndarray:
    """Chain rule: d residual / d x = (d residual / d e) @ de_dx, shape (1, M)."""
    e = _vec(e, gmm.dim)
    de_dx = np.atleast_2d(np.asarray(de_dx, dtype=float))
    if de_dx.shape[0] != gmm.dim:
        raise ValueError("de_dx must have D rows")
    _, dr = _sum_mixture_eval(gmm, e[None, :])
    return dr[0] @ de_dx


# ---------------------------------------------------------------------------
# Max-Mixture
# ---------------------------------------------------------------------------


def _max_mixture_eval(gmm: GaussianMixture, e: np.ndarray):
    log_c = gmm.log_scales()
    q = gmm.mahalanobis(e)
    # np.argmax returns the first maximum, i.e. ties go to the lower index
    best = np.argmax(log_c[None, :] - 0.5 * q, axis=1)
    rows = np.arange(e.shape[0])
    f = 0.5 * q[rows, best] + (np.max(log_c) - log_c[best])
    r = np.sqrt(np.maximum(f, 0.0))
    diff = e - gmm.means[best]
    grad = np.einsum("nij,nj->ni", gmm.info[best], diff)
    dr = np.empty_like(grad)
    nz = r > 0
    dr[nz] = grad[nz] / (2.0 * r[nz, None])
    dr[~nz] = SQRT_HALF * gmm.sqrt_info[best[~nz], 0, :]
    return r, best, dr


def max_mixture_cost(e, gmm: GaussianMixture) -> Tuple[float, int]:
    """Residual of the dominant component and its index.

    residual = sqrt(||R_k*(e - mu_k*)||^2 / 2 - ln(c_k* / max_j c_j)).
    """
    e = _vec(e, gmm.dim)
    r, best, _ = _max_mixture_eval(gmm, e[None, :])
    return float(r[0]), int(best[0])


# ---------------------------------------------------------------------------
# M-estimators
# ---------------------------------------------------------------------------


def dcs_weight(r2, phi: float = 1.0):
    """Dynamic covariance scaling factor s = min(1, 2 phi / (phi + r2))."""
    if phi <= 0:
        raise ValueError("phi must be positive")
    r2 = np.asarray(r2, dtype=float)
    if np.any(r2 < 0):
        raise ValueError("squared residual must be non-negative")
    s = np.minimum(1.0, 2.0 * phi / (phi + r2))
    return float(s) if s.ndim == 0 else s


def cdce_cost(r2, sigma_scale: float = 1.0):
    """Closed-form DCE cost on u = r2 / sigma^2: u below 1, 1 + ln(u) above."""
    if sigma_scale <= 0:
        raise ValueError("sigma_scale must be positive")
    u = np.asarray(r2, dtype=float) / sigma_scale ** 2
    if np.any(u < 0):
        raise ValueError("squared residual must be non-negative")
    out = np.where(u <= 1.0, u, 1.0 + np.log(np.maximum(u, 1.0)))
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Batched model objects used by the solver
# ---------------------------------------------------------------------------


def _broadcast_whitening(mean, sqrt_info, e: np.ndarray):
    """Whitened errors v_n = S_n (e_n - mu_n) for shared or per-row S and mu."""
    n, d = e.shape
    s = np.asarray(sqrt_info, dtype=float)
    if d == 1 and s.ndim <= 1:
        s = s.reshape(-1, 1, 1)
    elif s.ndim == 2:
        s = s[None]
    s = np.broadcast_to(s, (n, d, d))
    mu = np.asarray(mean, dtype=float)
    mu = np.broadcast_to(mu.reshape(-1, d) if mu.ndim else mu, (n, d))
    v = np.einsum("nij,nj->ni", s, e - mu)
    return v, s


class RobustModel:
    """Common interface: ``evaluate(e) -> (residuals (n, R), d residuals / d e (n, R, D))``."""

    kind = "abstract"
    dim = 1

    def evaluate(self, e: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def cost(self, e: np.ndarray) -> np.ndarray:
        r, _ = self.evaluate(np.atleast_2d(e))
        return np.sum(r ** 2, axis=1)


@dataclass(frozen=True)
class GaussianModel(RobustModel):
    """Plain Gaussian with a shared or per-row mean and square-root information."""

    mean: object = 0.0
    sqrt_info: object = 1.0
    dim: int = 1
    kind = "gaussian"

    def evaluate(self, e):
        v, s = _broadcast_whitening(self.mean, self.sqrt_info, e)
        return SQRT_HALF * v, SQRT_HALF * s


@dataclass(frozen=True)
class _ScaledGaussian(RobustModel):
    """Residual a(q) v / sqrt 2 with v the whitened error and q = ||v||^2."""

    mean: object = 0.0
    sqrt_info: object = 1.0
    dim: int = 1

    def _scale(self, q):
        raise NotImplementedError

    def evaluate(self, e):
        v, s = _broadcast_whitening(self.mean, self.sqrt_info, e)
        q = np.einsum("ni,ni->n", v, v)
        a, da = self._scale(q)
        res = SQRT_HALF * a[:, None] * v
        vs = np.einsum("ni,nij->nj", v, s)
        jac = SQRT_HALF * (a[:, None, None] * s + 2.0 * da[:, None, None] * v[:, :, None] * vs[:, None, :])
        return res, jac


@dataclass(frozen=True)
class DCSModel(_ScaledGaussian):
    """Dynamic covariance scaling: residual scaled by sqrt(s), s = min(1, 2 phi/(phi + q))."""

    phi: float = 1.0
    kind = "dcs"

    def __post_init__(self):
        if not self.phi > 0:
            raise ValueError("phi must be positive")

    def _scale(self, q):
        s = dcs_weight(q, self.phi)
        s = np.atleast_1d(s)
        a = np.sqrt(s)
        da = np.where(q > self.phi, -0.5 * a / (self.phi + q), 0.0)
        return a, da


@dataclass(frozen=True)
class CDCEModel(_ScaledGaussian):
    """Closed-form DCE: cost sigma^2 rho(q / sigma^2) / 2, Gaussian inside the knee."""

    sigma: float = 1.0
    kind = "cdce"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    def _scale(self, q):
        s2 = self.sigma ** 2
        u = q / s2
        outer = u > 1.0
        uo = np.where(outer, u, 1.0)
        a = np.where(outer, np.sqrt((1.0 + np.log(uo)) / uo), 1.0)
        da = np.where(outer, -np.log(uo) / (2.0 * a * uo ** 2) / s2, 0.0)
        return a, da


@dataclass(frozen=True)
class SumMixtureModel(RobustModel):
    gmm: GaussianMixture
    kind = "sum_mixture"

    @property
    def dim(self):
        return self.gmm.dim

    @cached_property
    def _const(self):
        # the mixture is fixed for the model's lifetime
        return _sum_mixture_constants(self.gmm), self.gmm.info

    def evaluate(self, e):
        const, info = self._const
        return _sum_mixture_eval(self.gmm, e, const, info)


@dataclass(frozen=True)
class MaxMixtureModel(RobustModel):
    gmm: GaussianMixture
    kind = "max_mixture"

    @property
    def dim(self):
        return self.gmm.dim

    def evaluate(self, e):
        r, _, dr = _max_mixture_eval(self.gmm, e)
        return r[:, None], dr[:, None, :]
