"""Sparse tensor-response regression estimators.

Model: ``Y_i = B xbar_{M+1} x_i + E_i`` with ``Y_i`` of shape ``dims``,
``x_i`` in ``R^q`` and ``B`` of shape ``dims + (q,)``.  Internally ``B``
is handled as the ``p x q`` matrix ``B.reshape(p, q, order='F')``.

Every penalized stage minimizes

    0.5 * sum_i w_i ||Y_i - B xbar x_i||^2_Xi + lam * sum_j r_j |b_j|

(or the group version with one group per response cell) by coordinate
descent, and certifies the result with a KKT residual.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg

from . import _kernels
from .covariance import (
    euclidean_weights,
    host_sigma,
    optimal_scale,
    plugin_objective,
    plugin_xi,
    rescale,
    t_weights,
    weighted_flip_flop,
)
from .tensor import KroneckerScale, mahalanobis_sq_batch, mode_product

log = logging.getLogger(__name__)

METHODS = ("ols", "tols", "apl", "apn", "apt", "ost", "host")
KKT_TOL = 1e-6
CD_TOL = 1e-7
FAST_TOL = 1e-4
MAX_SWEEPS = 100_000
N_LAMBDA = 50
LAMBDA_RATIO = 1e-3
CV_MM_TOL = 1e-6


class SingularDesignError(np.linalg.LinAlgError):
    """``X X^T`` is singular so the least-squares pilot does not exist."""


# ---------------------------------------------------------------------------
# data containers


@dataclass(frozen=True)
class Dataset:
    """Predictors ``x`` (q x n) and stacked responses ``y`` (``dims + (n,)``)."""

    x: np.ndarray
    y: np.ndarray
    centered: bool = False

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        y = np.asarray(self.y, dtype=float)
        if x.ndim != 2 or y.ndim < 2:
            raise ValueError("x must be q x n and y must have shape dims + (n,)")
        if x.shape[1] != y.shape[-1]:
            raise ValueError(f"sample counts differ: x has {x.shape[1]}, y has {y.shape[-1]}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.y.shape[:-1]

    @property
    def p(self) -> int:
        return int(np.prod(self.dims))

    @property
    def q(self) -> int:
        return self.x.shape[0]

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @property
    def yv(self) -> np.ndarray:
        """Responses as a ``p x n`` matrix of vectorized samples."""
        return self.y.reshape(self.p, self.n, order="F")

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[:, idx], self.y[..., idx], self.centered)

    def residuals(self, b: np.ndarray) -> np.ndarray:
        """``Y_i - B xbar x_i`` stacked as ``dims + (n,)``."""
        bmat = np.asarray(b).reshape(self.p, self.q, order="F")
        return (self.yv - bmat @ self.x).reshape(self.dims + (self.n,), order="F")


def center(ds: Dataset, warn: bool = True) -> Dataset:
    """Remove predictor and response means across samples."""
    if ds.n < 2:
        raise ValueError("centering needs at least two samples")
    x = ds.x - ds.x.mean(axis=1, keepdims=True)
    y = ds.y - ds.y.mean(axis=-1, keepdims=True)
    if warn:
        for k in np.flatnonzero(~np.any(x, axis=1)):
            log.warning("predictor %d is constant and becomes a zero column after centering", k)
    return Dataset(x, y, centered=True)


@dataclass(frozen=True)
class PenaltySpec:
    """Adaptive penalty: ``kind`` is ``'lasso'`` (elementwise) or ``'group'`` (per response cell).

    ``weights`` has shape ``(p, q)`` for lasso and ``(p,)`` for group; ``inf``
    forces the coefficient (or fiber) to zero.
    """

    kind: str
    lam: float
    weights: np.ndarray

    def __post_init__(self):
        if self.kind not in ("lasso", "group"):
            raise ValueError(f"unknown penalty kind {self.kind!r}")
        if not self.lam >= 0:
            raise ValueError("lambda must be nonnegative")
        w = np.asarray(self.weights, dtype=float)
        if np.any(np.isnan(w)) or np.any(w <= 0):
            raise ValueError("penalty weights must be positive (inf allowed)")
        object.__setattr__(self, "weights", w)

    def thresholds(self) -> np.ndarray:
        return np.where(np.isinf(self.weights), np.inf, self.lam * self.weights)

    def value(self, bmat: np.ndarray) -> float:
        """``lam * sum r_j |b_j|`` (lasso) or ``lam * sum r_J ||b_J||`` (group)."""
        a = np.abs(bmat) if self.kind == "lasso" else np.linalg.norm(bmat, axis=1)
        if np.any(np.isinf(self.weights) & (a > 0)):
            return math.inf
        fin = np.isfinite(self.weights)
        return float(self.lam * np.sum(self.weights[fin] * a[fin]))


@dataclass
class FitResult:
    b_hat: np.ndarray
    method: str
    lam: float | None = None
    nu_used: float | None = None
    xi_hat: KroneckerScale | None = None
    sample_weights: np.ndarray | None = None
    penalty: PenaltySpec | None = None
    iterations: int = 0
    objective: float = math.nan
    converged: bool = True
    kkt: float | None = None
    trace: list[float] = field(default_factory=list)
    info: dict = field(default_factory=dict)

    @property
    def dims(self):
        return self.b_hat.shape[:-1]

    @property
    def bmat(self) -> np.ndarray:
        p = int(np.prod(self.dims))
        return self.b_hat.reshape(p, self.b_hat.shape[-1], order="F")

    def active_set(self) -> np.ndarray:
        """Indices into ``vec(B)`` of the nonzero coefficients."""
        return np.flatnonzero(self.b_hat.reshape(-1, order="F"))

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return (self.bmat @ x).reshape(self.dims + (x.shape[1],), order="F")


def _as_tensor(bmat: np.ndarray, dims) -> np.ndarray:
    return bmat.reshape(tuple(dims) + (bmat.shape[1],), order="F")


# ---------------------------------------------------------------------------
# weighted penalized least squares


@dataclass
class _Problem:
    """Sufficient statistics of ``0.5 sum w_i ||y_i - B x_i||^2_Omega``."""

    dims: tuple
    sxx: np.ndarray
    syx: np.ndarray
    precisions: list | None
    odiag: np.ndarray
    pflat: np.ndarray
    offsets: np.ndarray
    dimarr: np.ndarray

    @property
    def identity(self) -> bool:
        return self.precisions is None

    def omega(self, mat: np.ndarray) -> np.ndarray:
        if self.identity:
            return mat
        q = mat.shape[1]
        t = mat.reshape(self.dims + (q,), order="F")
        for m, pm in enumerate(self.precisions):
            t = mode_product(t, pm, m)
        return t.reshape(-1, q, order="F")

    def gradient(self, bmat: np.ndarray) -> np.ndarray:
        """Negative gradient ``Omega (Syx - B Sxx)`` of the smooth part."""
        return self.omega(self.syx - bmat @ self.sxx)

    def smooth(self, bmat: np.ndarray) -> float:
        """Smooth part up to the constant ``0.5 sum w_i ||y_i||^2_Omega``."""
        return float(0.5 * np.sum(bmat * self.omega(bmat @ self.sxx)) - np.sum(bmat * self.omega(self.syx)))


def _problem(ds: Dataset, weights=None, xi: KroneckerScale | None = None) -> _Problem:
    xw = ds.x if weights is None else ds.x * weights
    sxx = xw @ ds.x.T
    syx = ds.yv @ xw.T
    dims = ds.dims
    dimarr = np.array(dims, dtype=np.int64)
    if xi is None:
        return _Problem(dims, sxx, syx, None, np.ones(ds.p), np.zeros(1), np.zeros(len(dims), np.int64), dimarr)
    prec = xi.inverses()
    odiag = np.ones(1)
    for pm in prec:
        odiag = np.kron(np.diag(pm), odiag)
    pflat = np.concatenate([pm.ravel(order="F") for pm in prec])
    offsets = np.cumsum([0] + [pm.size for pm in prec[:-1]]).astype(np.int64)
    return _Problem(dims, sxx, syx, prec, odiag, pflat, offsets, dimarr)


def kkt_residual(bmat: np.ndarray, grad: np.ndarray, thr: np.ndarray, kind: str = "lasso") -> float:
    """Largest violation of the subgradient optimality conditions.

    ``grad`` is the negative gradient of the smooth part at ``bmat``.
    """
    if kind == "lasso":
        fin = np.isfinite(thr)
        nz = bmat != 0
        if np.any(nz & ~fin):
            return math.inf
        t = np.where(fin, thr, 0.0)
        on = np.abs(grad - t * np.sign(bmat))
        off = np.maximum(np.abs(grad) - t, 0.0)
        res = np.where(nz, on, np.where(fin, off, 0.0))
        return float(res.max(initial=0.0))
    norms = np.linalg.norm(bmat, axis=1)
    fin = np.isfinite(thr)
    if np.any((norms > 0) & ~fin):
        return math.inf
    t = np.where(fin, thr, 0.0)
    out = 0.0
    for j in range(bmat.shape[0]):
        if norms[j] > 0:
            v = np.linalg.norm(grad[j] - t[j] * bmat[j] / norms[j])
        elif fin[j]:
            v = max(np.linalg.norm(grad[j]) - t[j], 0.0)
        else:
            v = 0.0
        out = max(out, v)
    return float(out)


@dataclass
class _Solve:
    bmat: np.ndarray
    sweeps: int
    kkt: float
    converged: bool


def _solve(prob: _Problem, thr: np.ndarray, kind: str, b0=None, fast: bool = False,
           kkt_tol: float = KKT_TOL, max_rounds: int = 50) -> _Solve:
    """Coordinate descent (lasso) or groupwise majorization descent (group).

    The incrementally maintained gradient is recomputed exactly between
    rounds so that the KKT certificate does not inherit rounding drift.
    """
    p, q = prob.syx.shape
    bmat = np.zeros((p, q)) if b0 is None else np.array(b0, dtype=float, order="C")
    thr = np.ascontiguousarray(thr, dtype=float)
    bmat[np.isinf(thr)] = 0.0
    sxx = np.ascontiguousarray(prob.sxx)
    hfac = float(np.linalg.eigvalsh(sxx)[-1]) if kind == "group" else 0.0
    total = 0
    kkt = math.inf
    tol = FAST_TOL if fast else CD_TOL
    for _ in range(max_rounds):
        grad = np.ascontiguousarray(prob.gradient(bmat))
        if kind == "lasso":
            total += _kernels.lasso_cd(bmat, grad, sxx, prob.odiag, thr, prob.pflat, prob.offsets,
                                       prob.dimarr, prob.identity, tol, MAX_SWEEPS, not fast)
        else:
            total += _kernels.group_gmd(bmat, grad, sxx, hfac, prob.odiag, thr, prob.pflat, prob.offsets,
                                        prob.dimarr, prob.identity, tol, MAX_SWEEPS, not fast)
        kkt = kkt_residual(bmat, prob.gradient(bmat), thr, kind)
        if fast or kkt < kkt_tol:
            return _Solve(bmat, total, kkt, True)
        tol *= 0.01
    log.warning("penalized solve stopped with KKT residual %.2e", kkt)
    return _Solve(bmat, total, kkt, False)


def penalized_ls_objective(ds: Dataset, b: np.ndarray, penalty: PenaltySpec,
                           weights=None, xi: KroneckerScale | None = None) -> float:
    """``0.5 sum w_i ||Y_i - B xbar x_i||^2_Xi + penalty(B)`` evaluated from residuals."""
    r = ds.residuals(b)
    if xi is None:
        rv = r.reshape(ds.p, ds.n, order="F")
        d = np.einsum("ji,ji->i", rv, rv)
    else:
        d = mahalanobis_sq_batch(r, xi)
    w = np.ones(ds.n) if weights is None else np.asarray(weights)
    bmat = np.asarray(b).reshape(ds.p, ds.q, order="F")
    return 0.5 * float(w @ d) + penalty.value(bmat)


def penalized_likelihood_objective(ds: Dataset, b: np.ndarray, xi: KroneckerScale, nu: float,
                                   penalty: PenaltySpec) -> float:
    """Negative penalized log-likelihood with constants dropped.

    ``(n/2) log|Xi| + ((nu+p)/2) sum log(1 + d_i/nu) + penalty`` for finite
    ``nu`` and ``(n/2) log|Xi| + (1/2) sum d_i + penalty`` for ``nu = inf``.
    """
    bmat = np.asarray(b).reshape(ds.p, ds.q, order="F")
    return plugin_objective(ds.residuals(b), xi, nu) + penalty.value(bmat)


# ---------------------------------------------------------------------------
# pilots and adaptive weights


def ols_matrix(ds: Dataset) -> np.ndarray:
    gram = ds.x @ ds.x.T
    try:
        c = linalg.cho_factor(gram, lower=True)
    except linalg.LinAlgError as exc:
        raise SingularDesignError("X X^T is singular; OLS pilot undefined") from exc
    if np.linalg.cond(gram) > 1e12:
        raise SingularDesignError("X X^T is numerically singular; OLS pilot undefined")
    return linalg.cho_solve(c, ds.x @ ds.yv.T).T


def adaptive_weights(pilot: np.ndarray, kind: str = "lasso") -> np.ndarray:
    """``1/b^2`` elementwise or ``1/||b_J||^2`` per row; ``inf`` where the pilot is zero."""
    a = pilot ** 2 if kind == "lasso" else np.sum(pilot ** 2, axis=1)
    with np.errstate(divide="ignore"):
        return np.where(a > 0, 1.0 / np.where(a > 0, a, 1.0), np.inf)


def lambda_max(grad0: np.ndarray, weights: np.ndarray, kind: str = "lasso") -> float:
    """Smallest ``lam`` at which ``B = 0`` is optimal."""
    g = np.abs(grad0) if kind == "lasso" else np.linalg.norm(grad0, axis=1)
    fin = np.isfinite(weights)
    if not np.any(fin):
        return 0.0
    return float(np.max(g[fin] / weights[fin]))


def lambda_grid(lam_max: float, n_lambda: int = N_LAMBDA, ratio: float = LAMBDA_RATIO) -> np.ndarray:
    """Decreasing log-spaced grid from ``lam_max`` to ``ratio * lam_max``."""
    if not lam_max > 0:
        return np.array([0.0])
    return np.geomspace(lam_max, lam_max * ratio, n_lambda)


# ---------------------------------------------------------------------------
# per-method stages.  A stage maps (training data, lambdas) to a list of
# coefficient matrices along the path, so that CV and final fits share code.


@dataclass
class _Stage:
    prob: _Problem
    weights: np.ndarray  # adaptive penalty weights
    kind: str
    xi: KroneckerScale | None = None
    sample_weights: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def lam_max(self) -> float:
        return lambda_max(self.prob.gradient(np.zeros_like(self.prob.syx)), self.weights, self.kind)

    def path(self, lambdas, fast=False):
        out = []
        b = None
        for lam in lambdas:
            pen = PenaltySpec(self.kind, float(lam), self.weights)
            s = _solve(self.prob, pen.thresholds(), self.kind, b, fast=fast)
            b = s.bmat
            out.append(s)
        return out


def _apl_stage(ds: Dataset, kind: str, pilot=None) -> _Stage:
    pilot = ols_matrix(ds) if pilot is None else pilot
    return _Stage(_problem(ds), adaptive_weights(pilot, kind), kind, info={"pilot": pilot})


def _apl_fit(ds: Dataset, stage: _Stage, lam: float, fast=False) -> np.ndarray:
    pen = PenaltySpec(stage.kind, lam, stage.weights)
    return _solve(stage.prob, pen.thresholds(), stage.kind, fast=fast).bmat


def _ost_stage(ds: Dataset, kind: str, lam_apl: float, nu: float, fast=False, pilot: str = "ols") -> _Stage:
    apl = _apl_stage(ds, kind)
    b_apl = _apl_fit(ds, apl, lam_apl, fast)
    st = plugin_xi(ds.residuals(b_apl), nu)
    if pilot == "ols":
        pen_w = apl.weights
    elif pilot == "apl":
        pen_w = adaptive_weights(b_apl, kind)
    else:
        raise ValueError(f"pilot must be 'ols' or 'apl', not {pilot!r}")
    stage = _Stage(_problem(ds, st.weights, st.xi), pen_w, kind, st.xi, st.weights)
    stage.info.update(b_apl=b_apl, plugin_converged=st.converged)
    return stage


def _host_stage(ds: Dataset, kind: str, lam_apl: float, split: str, seed: int, fast=False) -> _Stage:
    if split == "reuse":
        first, second = ds, ds
    elif split == "two-batch":
        perm = np.random.default_rng(seed).permutation(ds.n)
        half = ds.n // 2
        first, second = ds.subset(np.sort(perm[:half])), ds.subset(np.sort(perm[half:]))
    else:
        raise ValueError(f"unknown HOST split {split!r}")
    apl = _apl_stage(first, kind)
    b_apl = _apl_fit(first, apl, lam_apl, fast)
    xi = host_sigma(first.residuals(b_apl))
    w2 = euclidean_weights(second.residuals(b_apl))
    apl2 = apl if second is first else _apl_stage(second, kind)
    stage = _Stage(_problem(second, w2, xi), apl2.weights, kind, xi, w2)
    stage.info.update(b_apl=b_apl, batch=second)
    return stage


# ---------------------------------------------------------------------------
# majorize-minimize for the penalized likelihoods


@dataclass
class _MMState:
    bmat: np.ndarray
    xi: KroneckerScale
    weights: np.ndarray
    trace: list
    iterations: int
    converged: bool
    kkt: float


def _lik_value(d: np.ndarray, xi: KroneckerScale, nu: float) -> float:
    n, p = d.size, xi.size
    fit = 0.5 * d.sum() if math.isinf(nu) else 0.5 * (nu + p) * np.log1p(d / nu).sum()
    return 0.5 * n * xi.log_det_full() + float(fit)


def _mm(ds: Dataset, penalty: PenaltySpec, nu: float, b0: np.ndarray, xi0: KroneckerScale | None = None,
        tol: float = 1e-8, max_iter: int = 200, fast: bool = False, ff_tol: float = 1e-8,
        ff_sweeps: int = 200) -> _MMState:
    """Alternate weights, weighted flip-flop for the scale and a penalized weighted LS for ``B``.

    Each iteration minimizes the convex majorizer built at the current
    iterate over the scale (flip-flop from the current scale, then the
    exact overall factor) and then over ``B``.  ``ff_sweeps=1`` turns the
    scale step into a single descent sweep, which keeps monotonicity.
    """
    bmat = np.array(b0, dtype=float)
    xi = xi0 if xi0 is not None else KroneckerScale.identity(ds.dims)
    thr = penalty.thresholds()
    bmat[np.isinf(thr)] = 0.0
    p = ds.p
    r = ds.residuals(bmat)
    d = mahalanobis_sq_batch(r, xi)
    obj = _lik_value(d, xi, nu) + penalty.value(bmat)
    trace = [obj]
    kkt = math.nan
    for it in range(1, max_iter + 1):
        w = t_weights(d, nu, p)
        xi = weighted_flip_flop(r, w, init=xi, tol=ff_tol, max_sweeps=ff_sweeps, warn=ff_sweeps > 1).xi
        c = optimal_scale(mahalanobis_sq_batch(r, xi), nu, p)
        xi = rescale(xi, c)
        s = _solve(_problem(ds, w, xi), thr, penalty.kind, bmat, fast=fast)
        bmat, kkt = s.bmat, s.kkt
        r = ds.residuals(bmat)
        d = mahalanobis_sq_batch(r, xi)
        obj_new = _lik_value(d, xi, nu) + penalty.value(bmat)
        trace.append(obj_new)
        if abs(obj - obj_new) <= tol * max(1.0, abs(obj_new)):
            return _MMState(bmat, xi, t_weights(d, nu, p), trace, it, True, kkt)
        obj = obj_new
    log.warning("MM stopped after %d iterations", max_iter)
    return _MMState(bmat, xi, t_weights(d, nu, p), trace, max_iter, False, kkt)


def _mm_lam_max(ds: Dataset, weights: np.ndarray, kind: str, nu: float) -> float:
    r = ds.residuals(np.zeros((ds.p, ds.q)))
    xi = weighted_flip_flop(r).xi
    w = t_weights(mahalanobis_sq_batch(r, xi), nu, ds.p)
    prob = _problem(ds, w, xi)
    return lambda_max(prob.gradient(np.zeros((ds.p, ds.q))), weights, kind)


def _mm_path(ds: Dataset, weights: np.ndarray, kind: str, nu: float, lambdas, fast=False,
             max_iter: int = 200, tol: float = CV_MM_TOL) -> list:
    """MM solutions along a decreasing grid, each warm-started from the previous one.

    Used for CV only, hence the looser default tolerances.
    """
    b = ols_matrix(ds)
    xi = None
    out = []
    for lam in lambdas:
        st = _mm(ds, PenaltySpec(kind, float(lam), weights), nu, b, xi, tol=tol, max_iter=max_iter,
                 fast=fast, ff_tol=tol, ff_sweeps=1)
        b, xi = st.bmat, st.xi
        out.append(st)
    return out


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class CVResult:
    lam: float
    lambdas: np.ndarray
    errors: np.ndarray
    method: str
    folds: int
    seed: int

    @property
    def index(self) -> int:
        return int(np.flatnonzero(self.lambdas == self.lam)[0])


def fold_ids(n: int, folds: int, seed: int) -> np.ndarray:
    """Fold label per sample from a seeded permutation; sizes differ by at most one."""
    if folds < 2 or n < folds:
        raise ValueError(f"need 2 <= folds <= n, got folds={folds}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    ids = np.empty(n, dtype=int)
    ids[perm] = np.arange(n) % folds
    return ids


def _pick(lambdas: np.ndarray, errors: np.ndarray) -> float:
    """argmin of the CV error; ties resolved toward the larger lambda."""
    best = np.min(errors)
    cands = lambdas[errors <= best]
    return float(np.max(cands))


def _heldout_error(test: Dataset, bmat: np.ndarray) -> float:
    r = test.yv - bmat @ test.x
    return float(np.sum(r * r))


def cross_validate(ds: Dataset, method: str, lambdas=None, folds: int = 5, seed: int = 0,
                   kind: str = "lasso", nu: float = 4.0, lam_apl: float | None = None,
                   split: str = "reuse", fast: bool = False, pilot: str = "ols") -> CVResult:
    """K-fold CV of the final-stage ``lam`` for ``method`` with warm starts along the path.

    For the one-step methods the pilot, APL fit (at ``lam_apl``), scale
    and weights are recomputed on each training fold.
    """
    method = method.lower()
    if method not in ("apl", "apn", "apt", "ost", "host"):
        raise ValueError(f"method {method!r} has no tuning parameter")
    if method in ("ost", "host") and lam_apl is None:
        lam_apl = cross_validate(ds, "apl", None, folds, seed, kind).lam
    nu_eff = math.inf if method == "apn" else nu

    def build(train: Dataset):
        if method == "apl":
            return _apl_stage(train, kind)
        if method == "ost":
            return _ost_stage(train, kind, lam_apl, nu, fast, pilot)
        if method == "host":
            return _host_stage(train, kind, lam_apl, split, seed, fast)
        return None

    if lambdas is None:
        full = build(ds)
        if full is None:
            lmax = _mm_lam_max(ds, adaptive_weights(ols_matrix(ds), kind), kind, nu_eff)
        else:
            lmax = full.lam_max()
        lambdas = lambda_grid(lmax)
    lambdas = np.asarray(lambdas, dtype=float)
    if lambdas.size == 0:
        raise ValueError("empty lambda grid")
    if lambdas.size == 1:
        return CVResult(float(lambdas[0]), lambdas, np.zeros(1), method, folds, seed)
    order = np.argsort(-lambdas, kind="stable")
    ids = fold_ids(ds.n, folds, seed)
    errors = np.zeros(lambdas.size)
    for f in range(folds):
        train, test = ds.subset(np.flatnonzero(ids != f)), ds.subset(np.flatnonzero(ids == f))
        stage = build(train)
        if stage is None:
            w = adaptive_weights(ols_matrix(train), kind)
            fits = [s.bmat for s in _mm_path(train, w, kind, nu_eff, lambdas[order], fast)]
        else:
            fits = [s.bmat for s in stage.path(lambdas[order], fast)]
        for i, b in zip(order, fits):
            errors[i] += _heldout_error(test, b)
    errors /= ds.n
    return CVResult(_pick(lambdas, errors), lambdas, errors, method, folds, seed)


# ---------------------------------------------------------------------------
# public estimators


def fit_ols(ds: Dataset) -> FitResult:
    """Least-squares coefficient tensor ``Y xbar (X X^T)^{-1} X``."""
    bmat = ols_matrix(ds)
    return FitResult(_as_tensor(bmat, ds.dims), "ols", objective=0.5 * _heldout_error(ds, bmat))


def fit_tols(ds: Dataset, alpha: float = 0.05) -> FitResult:
    """OLS with coefficients kept only when an elementwise chi-square test rejects at Bonferroni level."""
    from scipy import stats

    bmat = ols_matrix(ds)
    resid = ds.yv - bmat @ ds.x
    dof = ds.n - ds.q
    if dof <= 0:
        raise SingularDesignError("no residual degrees of freedom for the OLS tests")
    s2 = np.sum(resid ** 2, axis=1) / dof
    ginv = np.diag(np.linalg.inv(ds.x @ ds.x.T))
    stat = bmat ** 2 / (s2[:, None] * ginv[None, :])
    pval = stats.chi2.sf(stat, 1)
    keep = pval < alpha / bmat.size
    return FitResult(_as_tensor(np.where(keep, bmat, 0.0), ds.dims), "tols", info={"p_values": pval})


def _resolve_lam(ds, method, lam, kind, folds, seed, nu, **kw):
    if lam is not None:
        return float(lam), None
    cv = cross_validate(ds, method, None, folds, seed, kind, nu, **kw)
    return cv.lam, cv


def fit_apl(ds: Dataset, lam: float | None = None, *, kind: str = "lasso", folds: int = 5,
            seed: int = 0, weights: np.ndarray | None = None, fast: bool = False) -> FitResult:
    """Adaptive penalized least squares; ``lam=None`` selects it by CV."""
    stage = _apl_stage(ds, kind)
    if weights is not None:
        stage.weights = np.asarray(weights, dtype=float)
    lam, cv = _resolve_lam(ds, "apl", lam, kind, folds, seed, math.inf) if weights is None else (float(lam), None)
    pen = PenaltySpec(kind, lam, stage.weights)
    s = _solve(stage.prob, pen.thresholds(), kind, fast=fast)
    b = _as_tensor(s.bmat, ds.dims)
    return FitResult(b, "apl", lam, None, penalty=pen, iterations=s.sweeps,
                     objective=penalized_ls_objective(ds, b, pen), converged=s.converged, kkt=s.kkt,
                     info={"cv": cv})


def _fit_mm(ds, method, lam, kind, nu, folds, seed, fast, max_iter) -> FitResult:
    nu_eff = math.inf if method == "apn" else float(nu)
    lam, cv = _resolve_lam(ds, method, lam, kind, folds, seed, nu_eff)
    pilot = ols_matrix(ds)
    pen = PenaltySpec(kind, lam, adaptive_weights(pilot, kind))
    st = _mm(ds, pen, nu_eff, pilot, None, max_iter=max_iter, fast=fast)
    return FitResult(_as_tensor(st.bmat, ds.dims), method, lam, nu_eff, st.xi, st.weights, pen,
                     st.iterations, st.trace[-1], st.converged, st.kkt, st.trace, {"cv": cv})


def fit_apn(ds: Dataset, lam: float | None = None, *, kind: str = "lasso", folds: int = 5, seed: int = 0,
            fast: bool = False, max_iter: int = 200) -> FitResult:
    """Penalized tensor-normal likelihood (unit weights) by block descent."""
    return _fit_mm(ds, "apn", lam, kind, math.inf, folds, seed, fast, max_iter)


def fit_apt_mm(ds: Dataset, lam: float | None = None, *, nu: float = 4.0, kind: str = "lasso",
               folds: int = 5, seed: int = 0, fast: bool = False, max_iter: int = 200) -> FitResult:
    """Penalized tensor-t likelihood by majorize-minimize."""
    if math.isinf(nu):
        raise ValueError("fit_apt_mm needs finite nu; use fit_apn for the normal limit")
    return _fit_mm(ds, "apt", lam, kind, nu, folds, seed, fast, max_iter)


def _fit_stage(ds, stage: _Stage, method, lam, cv, nu, lam_apl, fast) -> FitResult:
    pen = PenaltySpec(stage.kind, lam, stage.weights)
    s = _solve(stage.prob, pen.thresholds(), stage.kind, fast=fast)
    b = _as_tensor(s.bmat, ds.dims)
    batch = stage.info.get("batch", ds)
    obj = penalized_ls_objective(batch, b, pen, stage.sample_weights, stage.xi)
    info = {"cv": cv, "lam_apl": lam_apl, "b_apl": _as_tensor(stage.info["b_apl"], ds.dims)}
    return FitResult(b, method, lam, nu, stage.xi, stage.sample_weights, pen, s.sweeps, obj,
                     s.converged, s.kkt, info=info)


def fit_ost(ds: Dataset, lam: float | None = None, *, nu: float = 4.0, kind: str = "lasso",
            lam_apl: float | None = None, folds: int = 5, seed: int = 0, fast: bool = False,
            pilot: str = "ols") -> FitResult:
    """One-step estimator: OLS pilot, APL, plug-in scale and weights, then a convex weighted refit.

    ``lam_apl`` and ``lam`` are tuned separately by CV when not given.
    ``pilot="apl"`` builds the final-stage penalty weights from the APL fit
    instead of OLS, which can help tests in small samples.
    """
    if lam_apl is None:
        lam_apl = cross_validate(ds, "apl", None, folds, seed, kind).lam
    lam, cv = _resolve_lam(ds, "ost", lam, kind, folds, seed, nu, lam_apl=lam_apl, fast=fast, pilot=pilot)
    stage = _ost_stage(ds, kind, lam_apl, nu, fast, pilot)
    res = _fit_stage(ds, stage, "ost", lam, cv, nu, lam_apl, fast)
    res.info["pilot"] = pilot
    return res


def fit_host(ds: Dataset, lam: float | None = None, *, split: str = "reuse", kind: str = "lasso",
             lam_apl: float | None = None, folds: int = 5, seed: int = 0, fast: bool = False) -> FitResult:
    """Two-stage estimator with Euclidean-distance weights and closed-form mode covariances."""
    if lam_apl is None:
        lam_apl = cross_validate(ds, "apl", None, folds, seed, kind).lam
    lam, cv = _resolve_lam(ds, "host", lam, kind, folds, seed, math.inf, lam_apl=lam_apl, split=split, fast=fast)
    stage = _host_stage(ds, kind, lam_apl, split, seed, fast)
    res = _fit_stage(ds, stage, "host", lam, cv, None, lam_apl, fast)
    res.info["split"] = split
    return res


def fit_weighted(ds: Dataset, penalty: PenaltySpec, weights=None, xi: KroneckerScale | None = None,
                 b0=None, fast: bool = False) -> FitResult:
    """Solve one convex weighted penalized least-squares problem at fixed weights and scale."""
    prob = _problem(ds, None if weights is None else np.asarray(weights, dtype=float), xi)
    b0 = None if b0 is None else np.asarray(b0).reshape(ds.p, ds.q, order="F")
    s = _solve(prob, penalty.thresholds(), penalty.kind, b0, fast=fast)
    b = _as_tensor(s.bmat, ds.dims)
    obj = penalized_ls_objective(ds, b, penalty, weights, xi)
    return FitResult(b, "weighted", penalty.lam, None, xi, None if weights is None else np.asarray(weights),
                     penalty, s.sweeps, obj, s.converged, s.kkt)


def fit_group(ds: Dataset, lam: float | None = None, *, base: str = "ost", nu: float = 4.0, **kw) -> FitResult:
    """Adaptive group-lasso version of the APL, OST or APT estimators (one group per response cell)."""
    base = base.lower()
    if base == "apl":
        return fit_apl(ds, lam, kind="group", **kw)
    if base == "ost":
        return fit_ost(ds, lam, nu=nu, kind="group", **kw)
    if base == "apt":
        return fit_apt_mm(ds, lam, nu=nu, kind="group", **kw)
    raise ValueError(f"group penalty supports base apl, ost or apt, not {base!r}")


FITTERS: dict[str, Callable] = {
    "ols": fit_ols,
    "tols": fit_tols,
    "apl": fit_apl,
    "apn": fit_apn,
    "apt": fit_apt_mm,
    "ost": fit_ost,
    "host": fit_host,
}


def fit(ds: Dataset, method: str, **kw) -> FitResult:
    """Dispatch on a method tag."""
    try:
        fn = FITTERS[method.lower()]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}") from None
    return fn(ds, **kw)
