"""Kronecker-separable scale estimation.

All residual inputs are stacked tensors of shape ``dims + (n,)`` with the
sample index last.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize

from .tensor import (
    KroneckerScale,
    NotSPDError,
    mahalanobis_sq_batch,
    matricize,
    mode_gram,
    mode_product,
    normalize,
)

log = logging.getLogger(__name__)


class DegenerateDataError(ValueError):
    """Data carry no information about the scale (e.g. all-zero residuals)."""


@dataclass
class FlipFlopState:
    xi: KroneckerScale
    iteration: int
    last_delta: float
    converged: bool
    objective: list[float]


def _check_sample_size(dims, n):
    p = int(np.prod(dims))
    for m, pm in enumerate(dims):
        if n * (p // pm) <= pm:
            raise ValueError(
                f"flip-flop needs n * p_-m > p_m; mode {m}: n={n}, p_m={pm}, p_-m={p // pm}"
            )


def _check_weights(weights, n):
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,) or not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("weights must be n positive finite reals")
    return w


def flip_flop_objective(residuals, weights, xi: KroneckerScale) -> float:
    """``sum_m n p_-m log|Sigma_m| / 2 + sum_i w_i ||R_i||^2_Xi / 2``."""
    n = residuals.shape[-1]
    d = mahalanobis_sq_batch(residuals, xi)
    return 0.5 * n * xi.log_det_full() + 0.5 * float(np.dot(weights, d))


def _mode_update(sr: np.ndarray, precisions, m: int, n: int) -> np.ndarray:
    """``(1/(n p_-m)) sum_i R_i(m) Omega_-m R_i(m)^T`` via mode products.

    ``sr`` already carries the ``sqrt(w_i)`` factors on its sample axis.
    """
    t = sr
    for j, pj in enumerate(precisions):
        if j != m:
            t = mode_product(t, pj, j)
    s = mode_gram(t, sr, m)
    p_rest = sr.size // (sr.shape[m] * n)
    s /= n * p_rest
    return 0.5 * (s + s.T)


def _rel_change(old, new):
    return max(
        np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300) for a, b in zip(old.modes, new.modes)
    )


def weighted_flip_flop(
    residuals: np.ndarray,
    weights=None,
    init: KroneckerScale | None = None,
    tol: float = 1e-8,
    max_sweeps: int = 200,
    track_objective: bool = False,
    warn: bool = True,
) -> FlipFlopState:
    """Weighted flip-flop fixed point for the separable scale.

    Cyclically sets ``Sigma_m <- (1/(n p_-m)) sum_i w_i R_i(m) Omega_-m R_i(m)^T``
    for ``m = 1..M`` until the largest relative Frobenius change of the
    normalized mode matrices drops below ``tol``.
    """
    r = np.asarray(residuals, dtype=float)
    dims, n = r.shape[:-1], r.shape[-1]
    w = _check_weights(weights, n)
    _check_sample_size(dims, n)
    if not np.any(r):
        raise DegenerateDataError("all residuals are zero; the scale is undefined")
    sr = r * np.sqrt(w)

    if len(dims) == 1:
        s = sr @ sr.T / n
        xi = KroneckerScale([0.5 * (s + s.T)])
        xi.cholesky()
        obj = [flip_flop_objective(r, w, xi)] if track_objective else []
        return FlipFlopState(xi, 1, 0.0, True, obj)

    xi = normalize(init) if init is not None else KroneckerScale.identity(dims)
    if xi.dims != tuple(dims):
        raise ValueError(f"initial scale dims {xi.dims} do not match residual dims {dims}")
    objective = [flip_flop_objective(r, w, xi)] if track_objective else []
    delta = np.inf
    for sweep in range(1, max_sweeps + 1):
        mats = list(xi.modes)
        precs = xi.inverses()
        for m in range(len(dims)):
            mats[m] = _mode_update(sr, precs, m, n)
            try:
                c = linalg.cholesky(mats[m], lower=True)
                inv = linalg.cho_solve((c, True), np.eye(c.shape[0]))
                precs[m] = 0.5 * (inv + inv.T)
            except linalg.LinAlgError as exc:
                raise NotSPDError(
                    f"flip-flop lost positive definiteness in mode {m} at sweep {sweep}; "
                    f"min eigenvalue {np.linalg.eigvalsh(mats[m]).min():.3e}"
                ) from exc
        new = normalize(KroneckerScale(mats))
        delta = _rel_change(xi, new)
        xi = new
        if track_objective:
            objective.append(flip_flop_objective(r, w, xi))
        if delta < tol:
            return FlipFlopState(xi, sweep, delta, True, objective)
    if warn:
        log.warning("weighted flip-flop stopped after %d sweeps (last change %.2e)", max_sweeps, delta)
    return FlipFlopState(xi, max_sweeps, delta, False, objective)


def t_weights(d: np.ndarray, nu: float, p: int) -> np.ndarray:
    if np.isinf(nu):
        return np.ones_like(d)
    return (nu + p) / (nu + d)


def optimal_scale(d: np.ndarray, nu: float, p: int) -> float:
    """Factor ``c`` minimizing the plug-in objective over ``Xi -> c * Xi``.

    ``d`` are squared distances under the current scale.  Solves
    ``sum (nu + p) d_i / (nu c + d_i) = n p``; the left side decreases in
    ``c`` so the root is unique.  For ``nu = inf`` this is ``mean(d) / p``.
    """
    d = np.asarray(d, dtype=float)
    n = d.size
    if np.isinf(nu):
        return float(d.mean() / p)
    if not np.any(d > 0):
        raise DegenerateDataError("all residuals are zero; the scale is undefined")

    def h(t):
        return float(np.sum((nu + p) * d / (nu * np.exp(t) + d))) - n * p

    lo, hi = -1.0, 1.0
    while h(lo) < 0:
        lo *= 2
    while h(hi) > 0:
        hi *= 2
    return float(np.exp(optimize.brentq(h, lo, hi, xtol=1e-14, rtol=1e-15)))


def rescale(xi: KroneckerScale, c: float) -> KroneckerScale:
    """``c * Xi`` with the factor carried by the last mode."""
    mats = list(xi.modes)
    mats[-1] = mats[-1] * c
    return KroneckerScale(mats, normalized=xi.normalized)


def plugin_objective(residuals, xi: KroneckerScale, nu: float) -> float:
    """Negative plug-in log-likelihood of the scale given fixed residuals (constants dropped)."""
    n = residuals.shape[-1]
    p = xi.size
    d = mahalanobis_sq_batch(residuals, xi)
    if np.isinf(nu):
        fit = 0.5 * d.sum()
    else:
        fit = 0.5 * (nu + p) * np.log1p(d / nu).sum()
    return 0.5 * n * xi.log_det_full() + float(fit)


@dataclass
class PluginState:
    xi: KroneckerScale
    weights: np.ndarray
    iterations: int
    converged: bool
    objective: list[float]


def plugin_xi(
    residuals: np.ndarray,
    nu: float = 4.0,
    init: KroneckerScale | None = None,
    tol: float = 1e-8,
    max_iter: int = 200,
) -> PluginState:
    """Scale estimate given fixed regression residuals.

    Alternates t-weights ``(nu + p)/(nu + ||R_i||^2_Xi)`` with a converged
    weighted flip-flop started from the current scale, followed by an exact
    solve for the overall scale factor.  The factor is only weakly pinned
    by the weights when ``p`` is large, so without that step the
    iteration contracts at rate about ``p / (nu + p)``.
    """
    r = np.asarray(residuals, dtype=float)
    dims, n = r.shape[:-1], r.shape[-1]
    p = int(np.prod(dims))
    if not np.any(r):
        raise DegenerateDataError("all residuals are zero; the scale is undefined")
    if np.isinf(nu):
        st = weighted_flip_flop(r, None, init=init, tol=tol)
        return PluginState(st.xi, np.ones(n), 1, st.converged, [plugin_objective(r, st.xi, nu)])

    xi = normalize(init) if init is not None else KroneckerScale.identity(dims)
    objective = [plugin_objective(r, xi, nu)]
    for it in range(1, max_iter + 1):
        w = t_weights(mahalanobis_sq_batch(r, xi), nu, p)
        st = weighted_flip_flop(r, w, init=xi, tol=tol)
        new = rescale(st.xi, optimal_scale(mahalanobis_sq_batch(r, st.xi), nu, p))
        delta = _rel_change(xi, new)
        xi = new
        objective.append(plugin_objective(r, xi, nu))
        if delta < tol:
            w = t_weights(mahalanobis_sq_batch(r, xi), nu, p)
            return PluginState(xi, w, it, True, objective)
    log.warning("plug-in scale estimation hit %d iterations", max_iter)
    w = t_weights(mahalanobis_sq_batch(r, xi), nu, p)
    return PluginState(xi, w, max_iter, False, objective)


def euclidean_weights(residuals: np.ndarray) -> np.ndarray:
    """``p / ||R_i||^2`` for each sample."""
    r = np.asarray(residuals, dtype=float)
    p = int(np.prod(r.shape[:-1]))
    sq = np.einsum("ji,ji->i", r.reshape(p, -1, order="F"), r.reshape(p, -1, order="F"))
    if np.any(sq == 0):
        raise DegenerateDataError("a residual tensor is exactly zero; Euclidean weight undefined")
    return p / sq


def host_sigma(residuals: np.ndarray, weights=None) -> KroneckerScale:
    """Closed-form mode covariances ``(1/(n p_-m)) sum_i w_i R_i(m) R_i(m)^T``.

    ``weights`` default to the Euclidean weights ``p / ||R_i||^2``.
    """
    r = np.asarray(residuals, dtype=float)
    dims, n = r.shape[:-1], r.shape[-1]
    if not np.any(r):
        raise DegenerateDataError("all residuals are zero; the scale is undefined")
    w = euclidean_weights(r) if weights is None else _check_weights(weights, n)
    sr = r * np.sqrt(w)
    mats = []
    for m in range(len(dims)):
        a = matricize(sr, m)
        s = a @ a.T / (n * (a.shape[1] // n))
        mats.append(0.5 * (s + s.T))
    xi = KroneckerScale(mats)
    try:
        xi.cholesky()
    except NotSPDError as exc:
        raise NotSPDError(f"closed-form mode covariance is singular: {exc}") from exc
    return normalize(xi)
