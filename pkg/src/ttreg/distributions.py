"""Tensor normal and tensor t distributions.

``nu = inf`` is a first-class value and denotes the tensor normal.
Stacked samples use shape ``dims + (n,)``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .covariance import optimal_scale, rescale, t_weights, weighted_flip_flop
from .tensor import KroneckerScale, mahalanobis_sq_batch, tucker

log = logging.getLogger(__name__)

NU_BRACKET = (0.1, 1000.0)
ECME_WARN_P = 500


@dataclass(frozen=True)
class TensorTParams:
    mu: np.ndarray
    xi: KroneckerScale
    nu: float = math.inf

    def __post_init__(self):
        if not (self.nu > 0):
            raise ValueError(f"degrees of freedom must be positive, got {self.nu}")
        if np.shape(self.mu) != self.xi.dims:
            raise ValueError(f"location dims {np.shape(self.mu)} do not match scale dims {self.xi.dims}")

    @property
    def dims(self):
        return self.xi.dims

    @property
    def p(self):
        return self.xi.size


def sample_tn(params: TensorTParams, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw ``mu + [[Z; Sigma_1^{1/2}, ..., Sigma_M^{1/2}]]``.

    With ``size`` the draws are stacked along a trailing sample axis.
    """
    roots = params.xi.sqrtms()
    shape = params.dims if size is None else params.dims + (size,)
    z = rng.standard_normal(shape, dtype=float)
    out = tucker(z, roots)
    mu = np.asarray(params.mu, dtype=float)
    return out + (mu if size is None else mu[..., None])


def sample_latent(nu: float, rng: np.random.Generator, size=None):
    """Mixing variable ``G ~ chi2_nu / nu``."""
    return rng.chisquare(nu, size=size) / nu


def sample_tt(params: TensorTParams, rng: np.random.Generator, size: int | None = None):
    """Draw ``X / sqrt(G) + mu`` and return it together with the latent ``G``."""
    if math.isinf(params.nu):
        y = sample_tn(params, rng, size)
        return y, (np.ones(size) if size is not None else 1.0)
    zero = TensorTParams(np.zeros(params.dims), params.xi, math.inf)
    x = sample_tn(zero, rng, size)
    g = sample_latent(params.nu, rng, size)
    mu = np.asarray(params.mu, dtype=float)
    if size is None:
        return x / math.sqrt(g) + mu, float(g)
    return x / np.sqrt(g) + mu[..., None], g


def _log_norm_const(p: int, nu: float, xi: KroneckerScale) -> float:
    logdet = xi.log_det_full()
    if math.isinf(nu):
        return -0.5 * p * math.log(2 * math.pi) - 0.5 * logdet
    # lgamma((nu+p)/2) - lgamma(nu/2) through betaln, which stays accurate for large nu
    return (
        special.gammaln(0.5 * p)
        - special.betaln(0.5 * nu, 0.5 * p)
        - 0.5 * p * math.log(math.pi * nu)
        - 0.5 * logdet
    )


def log_density_tt_batch(y: np.ndarray, params: TensorTParams) -> np.ndarray:
    """Log densities of stacked samples ``y`` (shape ``dims + (n,)``)."""
    y = np.asarray(y, dtype=float)
    d = mahalanobis_sq_batch(y - np.asarray(params.mu)[..., None], params.xi)
    p, nu = params.p, params.nu
    const = _log_norm_const(p, nu, params.xi)
    if math.isinf(nu):
        return const - 0.5 * d
    return const - 0.5 * (nu + p) * np.log1p(d / nu)


def log_density_tt(y: np.ndarray, params: TensorTParams) -> float:
    return float(log_density_tt_batch(np.asarray(y)[..., None], params)[0])


def weight(d: float | np.ndarray, nu: float, p: int):
    """Robustness weight ``(nu + p) / (nu + d)`` for squared Mahalanobis distance ``d``."""
    return t_weights(np.asarray(d, dtype=float), nu, p)


def negative_log_likelihood(y: np.ndarray, params: TensorTParams) -> float:
    return -float(log_density_tt_batch(y, params).sum())


@dataclass
class EMResult:
    mu: np.ndarray
    xi: KroneckerScale
    weights: np.ndarray
    iterations: int
    converged: bool
    nll: list[float] = field(default_factory=list)


def em_fit_location_scale(
    samples: np.ndarray, nu: float = 4.0, tol: float = 1e-8, max_iter: int = 500
) -> EMResult:
    """Maximum likelihood ``(mu, Xi)`` for tensor t data with known ``nu``.

    E-step weights, weighted mean, then a weighted flip-flop warm-started
    from the previous scale and an exact step on the overall scale factor.  Stops on relative change of the exact
    negative log-likelihood.
    """
    y = np.asarray(samples, dtype=float)
    dims, n = y.shape[:-1], y.shape[-1]
    p = int(np.prod(dims))
    if n < 2:
        raise ValueError("at least two samples are required")
    for pm in dims:
        if n * (p // pm) <= pm:
            raise ValueError(f"need n * p_-m > p_m for every mode (n={n}, dims={dims})")

    mu = y.mean(axis=-1)
    xi = KroneckerScale.identity(dims)
    nll = [negative_log_likelihood(y, TensorTParams(mu, xi, nu))]
    w = np.ones(n)
    for it in range(1, max_iter + 1):
        w = t_weights(mahalanobis_sq_batch(y - mu[..., None], xi), nu, p)
        mu = (y @ w) / w.sum()
        r = y - mu[..., None]
        xi = weighted_flip_flop(r, w, init=xi).xi
        xi = rescale(xi, optimal_scale(mahalanobis_sq_batch(r, xi), nu, p))
        nll.append(negative_log_likelihood(y, TensorTParams(mu, xi, nu)))
        if abs(nll[-2] - nll[-1]) <= tol * max(1.0, abs(nll[-1])):
            return EMResult(mu, xi, w, it, True, nll)
    log.warning("EM for (mu, Xi) did not converge in %d iterations", max_iter)
    return EMResult(mu, xi, w, max_iter, False, nll)


def nu_score(nu: float, d: np.ndarray, p: int) -> float:
    """Derivative (times 2/n) of the profile log-likelihood in ``nu`` at fixed scale."""
    w = (nu + p) / (nu + d)
    return (
        -special.digamma(0.5 * nu)
        + math.log(0.5 * nu)
        + float(np.mean(np.log(w) - w))
        + 1.0
        + special.digamma(0.5 * (nu + p))
        - math.log(0.5 * (nu + p))
    )


def _solve_nu(d: np.ndarray, p: int, bracket=NU_BRACKET, xtol: float = 1e-10):
    """Root of :func:`nu_score` by bisection in ``log nu``; clamps at the bracket ends."""
    lo, hi = bracket
    f_lo, f_hi = nu_score(lo, d, p), nu_score(hi, d, p)
    if f_hi > 0:
        return hi, "upper"
    if f_lo < 0:
        return lo, "lower"
    a, b = math.log(lo), math.log(hi)
    while b - a > xtol:
        mid = 0.5 * (a + b)
        if nu_score(math.exp(mid), d, p) > 0:
            a = mid
        else:
            b = mid
    return math.exp(0.5 * (a + b)), None


@dataclass
class ECMEResult:
    nu: float
    xi: KroneckerScale
    iterations: int
    converged: bool
    at_bound: str | None
    trace: list[float] = field(default_factory=list)


def ecme_estimate_nu(
    residuals: np.ndarray,
    nu0: float = 4.0,
    tol: float = 1e-6,
    max_iter: int = 200,
    bracket=NU_BRACKET,
) -> ECMEResult:
    """Joint estimate of ``nu`` and the scale from fixed residuals.

    Alternates a weighted flip-flop at the current ``nu`` with a 1-D root
    solve of the profile score equation over ``bracket``.  A root outside
    the bracket is clamped and reported through ``at_bound``.
    """
    r = np.asarray(residuals, dtype=float)
    dims, n = r.shape[:-1], r.shape[-1]
    p = int(np.prod(dims))
    if p > ECME_WARN_P:
        warnings.warn(
            f"estimating nu with p={p} is unreliable; prefer the fixed default nu=4",
            RuntimeWarning,
            stacklevel=2,
        )
    nu = float(nu0)
    xi = KroneckerScale.identity(dims)
    trace = [nu]
    bound = None
    for it in range(1, max_iter + 1):
        w = t_weights(mahalanobis_sq_batch(r, xi), nu, p)
        xi = weighted_flip_flop(r, w, init=xi).xi
        xi = rescale(xi, optimal_scale(mahalanobis_sq_batch(r, xi), nu, p))
        d = mahalanobis_sq_batch(r, xi)
        new_nu, bound = _solve_nu(d, p, bracket)
        trace.append(new_nu)
        if abs(new_nu - nu) <= tol * max(1.0, nu):
            return ECMEResult(new_nu, xi, it, bound is None, bound, trace)
        nu = new_nu
    return ECMEResult(nu, xi, max_iter, False, bound, trace)
