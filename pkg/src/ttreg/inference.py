"""Asymptotic covariances on the estimated support and Wald-type tests.

Coefficients are indexed by their position in ``vec(B)``, i.e. cell ``J``
(column-major over the response modes) and predictor ``k`` give
``J + p * k``.  Submatrices of ``Sigma_X (x) Sigma^{-1}`` are built entry
by entry from the mode matrices, so the ``pq x pq`` Kronecker matrix is
never formed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import linalg, stats

from .tensor import KroneckerScale

FLAVORS = ("L", "N", "T", "OST")


@dataclass(frozen=True)
class AsymptoticCov:
    matrix: np.ndarray
    flavor: str
    active_set: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (len(self.active_set),) * 2:
            raise ValueError("covariance size does not match the active set")
        object.__setattr__(self, "matrix", 0.5 * (m + m.T))
        object.__setattr__(self, "active_set", np.asarray(self.active_set, dtype=np.int64))

    def position(self, index: int) -> int:
        hit = np.flatnonzero(self.active_set == index)
        if hit.size == 0:
            raise ValueError(f"coefficient {index} is not in the estimated active set")
        return int(hit[0])


@dataclass(frozen=True)
class TestResult:
    statistic: float
    df: int
    p_value: float
    hypothesis: str


def _split_index(active, p, dims):
    active = np.asarray(active, dtype=np.int64)
    cell, k = active % p, active // p
    subs = np.unravel_index(cell, dims, order="F")
    return subs, k


def kron_submatrix(sigma_x: np.ndarray, modes: Sequence[np.ndarray], active) -> np.ndarray:
    """``(Sigma_X (x) A_M (x) ... (x) A_1)`` restricted to rows and columns ``active``."""
    dims = tuple(m.shape[0] for m in modes)
    p = int(np.prod(dims))
    subs, k = _split_index(active, p, dims)
    out = np.asarray(sigma_x, dtype=float)[np.ix_(k, k)].copy()
    for mat, s in zip(modes, subs):
        out *= mat[np.ix_(s, s)]
    return out


def _inv_spd(a: np.ndarray, what: str) -> np.ndarray:
    try:
        c = linalg.cho_factor(a, lower=True)
    except linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"{what} restricted to the active set is singular") from exc
    inv = linalg.cho_solve(c, np.eye(a.shape[0]))
    return 0.5 * (inv + inv.T)


def _t_factor(nu, p):
    return 1.0 if math.isinf(nu) else (nu + p + 2) / (nu + p)


def _moment_factor(nu):
    if math.isinf(nu):
        return 1.0
    if nu <= 2:
        raise ValueError("the covariance of a tensor t needs nu > 2")
    return nu / (nu - 2)


def cov_T(sigma_x, xi: KroneckerScale, nu: float, active) -> AsymptoticCov:
    """``V_T = ((nu+p+2)/(nu+p)) [(Sigma_X (x) Sigma^{-1})_A]^{-1}``."""
    j = kron_submatrix(sigma_x, xi.inverses(), active)
    return AsymptoticCov(_t_factor(nu, xi.size) * _inv_spd(j, "Sigma_X (x) Sigma^-1"), "T", active)


def cov_N(sigma_x, xi: KroneckerScale, nu: float, active) -> AsymptoticCov:
    """``V_N = (nu/(nu-2)) [(Sigma_X (x) Sigma^{-1})_A]^{-1}``."""
    j = kron_submatrix(sigma_x, xi.inverses(), active)
    return AsymptoticCov(_moment_factor(nu) * _inv_spd(j, "Sigma_X (x) Sigma^-1"), "N", active)


def cov_L(sigma_x, xi: KroneckerScale, nu: float, active) -> AsymptoticCov:
    """Sandwich ``(nu/(nu-2)) A^{-1} (Sigma_X (x) Sigma)_A A^{-1}`` with ``A = (Sigma_X (x) I)_A``."""
    eye = [np.eye(d) for d in xi.dims]
    ainv = _inv_spd(kron_submatrix(sigma_x, eye, active), "Sigma_X (x) I")
    mid = kron_submatrix(sigma_x, xi.modes, active)
    return AsymptoticCov(_moment_factor(nu) * ainv @ mid @ ainv, "L", active)


def cov_OST(vt: AsymptoticCov, vl: AsymptoticCov, nu: float, p: int) -> AsymptoticCov:
    """``V = V_T + 4 (V_L - V_T) / (nu + p + 2)^2``."""
    if not np.array_equal(vt.active_set, vl.active_set):
        raise ValueError("V_T and V_L are defined on different active sets")
    c = 0.0 if math.isinf(nu) else 4.0 / (nu + p + 2) ** 2
    return AsymptoticCov(vt.matrix + c * (vl.matrix - vt.matrix), "OST", vt.active_set)


def sigma_x_hat(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x @ x.T / x.shape[1]


def asymptotic_cov(fit, x: np.ndarray, flavor: str = "OST", nu: float | None = None) -> AsymptoticCov:
    """Plug-in covariance on the fit's active set using ``Sigma_X = X X^T / n`` and the fitted scale."""
    flavor = flavor.upper()
    if flavor not in FLAVORS:
        raise ValueError(f"flavor must be one of {FLAVORS}")
    if fit.xi_hat is None:
        raise ValueError(f"fit from method {fit.method!r} carries no scale estimate")
    nu = nu if nu is not None else (fit.nu_used if fit.nu_used is not None else 4.0)
    sx = sigma_x_hat(x)
    active = fit.active_set()
    if active.size == 0:
        raise ValueError("the fit has an empty active set")
    xi = fit.xi_hat
    if flavor == "T":
        return cov_T(sx, xi, nu, active)
    if flavor == "N":
        return cov_N(sx, xi, nu, active)
    if flavor == "L":
        return cov_L(sx, xi, nu, active)
    return cov_OST(cov_T(sx, xi, nu, active), cov_L(sx, xi, nu, active), nu, xi.size)


def coef_index(coord, dims) -> int:
    """``vec(B)`` position of a 0-based coordinate ``(j_1, ..., j_M, k)``."""
    coord = tuple(int(c) for c in coord)
    if len(coord) != len(dims) + 1:
        raise ValueError(f"coordinate {coord} needs {len(dims) + 1} entries")
    if coord[-1] < 0:
        raise ValueError(f"predictor index {coord[-1]} is negative")
    return int(np.ravel_multi_index(coord[:-1], tuple(dims), order="F")) + int(np.prod(dims)) * coord[-1]


def wald_test(fit, cov: AsymptoticCov, n: int, coords: Sequence[int], values,
              h: Callable | None = None, jac: Callable | None = None) -> TestResult:
    """Wald statistic ``T = n D^T (H V H^T)^{-1} D`` with ``D = h(b_hat) - h(b_star)``.

    ``coords`` are ``vec(B)`` indices (all must be in the active set),
    ``values`` the hypothesized coefficients at those positions.  ``h``
    maps the selected coefficients to ``R^k`` and ``jac`` returns its
    ``k x len(coords)`` Jacobian; both default to the identity.
    """
    coords = [int(c) for c in np.atleast_1d(coords)]
    pos = [cov.position(c) for c in coords]
    vec_b = fit.b_hat.reshape(-1, order="F")
    b_hat = vec_b[coords]
    b_star = np.asarray(values, dtype=float).reshape(-1)
    if b_star.size != len(coords):
        raise ValueError("one hypothesized value per coordinate is required")
    if h is None:
        delta = b_hat - b_star
        hmat = np.eye(len(coords))
    else:
        delta = np.atleast_1d(h(b_hat) - h(b_star))
        hmat = np.atleast_2d(jac(b_hat))
    k = delta.size
    if np.linalg.matrix_rank(hmat) < k:
        raise np.linalg.LinAlgError("the Jacobian of h is rank deficient")
    v = cov.matrix[np.ix_(pos, pos)]
    mid = hmat @ v @ hmat.T
    stat = float(n * delta @ np.linalg.solve(mid, delta))
    pval = float(stats.chi2.sf(stat, k))
    desc = f"h(b[{','.join(map(str, coords))}]) = h({', '.join(f'{x:.6g}' for x in b_star)})"
    return TestResult(stat, k, pval, desc)


def confidence_interval(fit, cov: AsymptoticCov, n: int, coord: int, level: float = 0.95):
    """Wald interval ``b_hat +- z sqrt(V_jj / n)``."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    pos = cov.position(int(coord))
    vjj = cov.matrix[pos, pos]
    if not vjj > 0:
        raise ValueError("degenerate variance for the requested coefficient")
    b = fit.b_hat.reshape(-1, order="F")[int(coord)]
    half = stats.norm.ppf(0.5 + level / 2) * math.sqrt(vjj / n)
    return float(b - half), float(b + half)
