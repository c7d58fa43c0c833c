"""Dense tensor operators and Kronecker-separable scale matrices.

Tensors are plain ``numpy.ndarray`` objects.  Vectorization and
matricization use generalized column-major order (first index fastest),
so ``vectorize(A)[j]`` holds element ``(i_1, ..., i_M)`` with
``j = sum_m i_m * prod_{k<m} p_k`` (0-based).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from typing import Sequence

import numpy as np
from scipy import linalg

KRON_CAP = 4096


class NotSPDError(np.linalg.LinAlgError):
    """A mode matrix failed symmetric positive-definite factorization."""


def vectorize(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=float).reshape(-1, order="F")


def devectorize(v: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.size != int(np.prod(dims)):
        raise ValueError(f"cannot reshape {v.size} values into dims {tuple(dims)}")
    return v.reshape(tuple(dims), order="F")


def _check_mode(a: np.ndarray, n: int) -> None:
    if not 0 <= n < a.ndim:
        raise ValueError(f"mode {n} out of range for a {a.ndim}-way tensor")


def matricize(a: np.ndarray, n: int) -> np.ndarray:
    """Mode-``n`` unfolding (0-based mode), shape ``(p_n, prod_{k!=n} p_k)``.

    Columns are the mode-``n`` fibers, ordered with the remaining indices
    in column-major order.
    """
    a = np.asarray(a)
    _check_mode(a, n)
    return np.moveaxis(a, n, 0).reshape(a.shape[n], -1, order="F")


def fold(mat: np.ndarray, n: int, dims: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`matricize`."""
    dims = tuple(dims)
    rest = dims[:n] + dims[n + 1:]
    return np.moveaxis(np.asarray(mat).reshape((dims[n],) + rest, order="F"), 0, n)


def mode_product(a: np.ndarray, g: np.ndarray, n: int) -> np.ndarray:
    """Multiply every mode-``n`` fiber of ``a`` by ``g`` (shape ``s x p_n``)."""
    a = np.asarray(a)
    g = np.asarray(g)
    _check_mode(a, n)
    if g.ndim != 2 or g.shape[1] != a.shape[n]:
        raise ValueError(
            f"matrix with shape {g.shape} does not match mode {n} of size {a.shape[n]}"
        )
    # view as (A, p_n, B) so the product is a batched matmul without transposes
    a3 = np.ascontiguousarray(a).reshape(_split(a.shape, n))
    out = np.matmul(g, a3)
    return out.reshape(a.shape[:n] + (g.shape[0],) + a.shape[n + 1:])


def _split(shape, n):
    return (int(np.prod(shape[:n])), shape[n], int(np.prod(shape[n + 1:])))


def mode_gram(a: np.ndarray, b: np.ndarray, n: int) -> np.ndarray:
    """``matricize(a, n) @ matricize(b, n).T`` without forming the unfoldings."""
    a3 = np.ascontiguousarray(a).reshape(_split(a.shape, n))
    b3 = np.ascontiguousarray(b).reshape(_split(b.shape, n))
    if a3.shape[0] == 1:
        return a3[0] @ b3[0].T
    return np.einsum("aib,ajb->ij", a3, b3, optimize=True)


def mode_vec_product(a: np.ndarray, c: np.ndarray, n: int) -> np.ndarray:
    """Contract mode ``n`` of ``a`` with vector ``c``; the result has one fewer mode."""
    a = np.asarray(a)
    c = np.asarray(c)
    _check_mode(a, n)
    if c.shape != (a.shape[n],):
        raise ValueError(f"vector of length {c.shape} does not match mode size {a.shape[n]}")
    return np.tensordot(a, c, axes=(n, 0))


def tucker(a: np.ndarray, mats: Sequence[np.ndarray | None], modes: Sequence[int] | None = None) -> np.ndarray:
    """Tucker product ``[[A; G_1, ..., G_K]]``; ``None`` entries are skipped."""
    if modes is None:
        modes = range(len(mats))
    out = np.asarray(a)
    for g, n in zip(mats, modes):
        if g is not None:
            out = mode_product(out, g, n)
    return out


def ar_matrix(p: int, rho: float) -> np.ndarray:
    """Auto-regressive correlation matrix with entries ``rho**|i-j|``."""
    if not abs(rho) < 1:
        raise ValueError(f"AR correlation must satisfy |rho| < 1, got {rho}")
    idx = np.arange(p)
    return float(rho) ** np.abs(idx[:, None] - idx[None, :])


def kron_all(mats: Sequence[np.ndarray]) -> np.ndarray:
    """``mats[-1] (x) ... (x) mats[0]``, matching column-major vectorization."""
    return reduce(lambda acc, m: np.kron(m, acc), mats[1:], np.asarray(mats[0]))


@dataclass(frozen=True)
class KroneckerScale:
    """Separable scale ``Sigma_M (x) ... (x) Sigma_1`` stored mode by mode."""

    modes: tuple[np.ndarray, ...]
    normalized: bool = False

    def __init__(self, modes: Sequence[np.ndarray], normalized: bool = False):
        mats = []
        for m, s in enumerate(modes):
            s = np.array(s, dtype=float)
            if s.ndim != 2 or s.shape[0] != s.shape[1]:
                raise ValueError(f"mode {m} matrix must be square, got shape {s.shape}")
            if not np.allclose(s, s.T, rtol=0, atol=1e-12 * max(1.0, np.abs(s).max())):
                raise NotSPDError(f"mode {m} matrix is not symmetric")
            s = 0.5 * (s + s.T)
            s.setflags(write=False)
            mats.append(s)
        object.__setattr__(self, "modes", tuple(mats))
        object.__setattr__(self, "normalized", bool(normalized))

    @classmethod
    def identity(cls, dims: Sequence[int]) -> "KroneckerScale":
        return cls([np.eye(p) for p in dims], normalized=True)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(s.shape[0] for s in self.modes)

    @property
    def order(self) -> int:
        return len(self.modes)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def cholesky(self) -> list[np.ndarray]:
        out = []
        for m, s in enumerate(self.modes):
            try:
                out.append(linalg.cholesky(s, lower=True))
            except linalg.LinAlgError as exc:
                raise NotSPDError(f"mode {m} matrix is not positive definite") from exc
        return out

    def inverses(self) -> list[np.ndarray]:
        out = []
        for c in self.cholesky():
            inv = linalg.cho_solve((c, True), np.eye(c.shape[0]))
            out.append(0.5 * (inv + inv.T))
        return out

    def logdets(self) -> np.ndarray:
        return np.array([2.0 * np.log(np.diag(c)).sum() for c in self.cholesky()])

    def log_det_full(self) -> float:
        """``log |Sigma_M (x) ... (x) Sigma_1|`` without materializing it."""
        p = self.size
        return float(sum(p / pm * ld for pm, ld in zip(self.dims, self.logdets())))

    def sqrtms(self) -> list[np.ndarray]:
        """Symmetric square roots via eigendecomposition."""
        out = []
        for m, s in enumerate(self.modes):
            vals, vecs = np.linalg.eigh(s)
            if vals.min() <= 0:
                raise NotSPDError(f"mode {m} matrix is not positive definite")
            out.append((vecs * np.sqrt(vals)) @ vecs.T)
        return out

    def scaled(self, factors: Sequence[float]) -> "KroneckerScale":
        return KroneckerScale([a * s for a, s in zip(factors, self.modes)])

    def kron(self, cap: int = KRON_CAP) -> np.ndarray:
        return kron_materialize(self, cap)


def normalize(xi: KroneckerScale) -> KroneckerScale:
    """Fix ``Sigma_m[0, 0] = 1`` for all but the last mode; the last absorbs the scale."""
    mats = [np.array(s) for s in xi.modes]
    total = 1.0
    for m in range(len(mats) - 1):
        c = mats[m][0, 0]
        if not c > 0:
            raise NotSPDError(f"mode {m} has nonpositive leading entry {c}")
        mats[m] = mats[m] / c
        total *= c
    mats[-1] = mats[-1] * total
    return KroneckerScale(mats, normalized=True)


def kron_materialize(xi: KroneckerScale, cap: int = KRON_CAP) -> np.ndarray:
    """Full ``p x p`` Kronecker matrix; test support only."""
    if xi.size > cap:
        raise ValueError(f"refusing to materialize a {xi.size}x{xi.size} Kronecker matrix (cap {cap})")
    return kron_all(xi.modes)


def whiten(d: np.ndarray, chols: Sequence[np.ndarray]) -> np.ndarray:
    """Apply ``L_m^{-1}`` along each leading mode; trailing modes are left alone."""
    out = np.asarray(d, dtype=float)
    for n, c in enumerate(chols):
        mat = matricize(out, n)
        out = fold(linalg.solve_triangular(c, mat, lower=True, check_finite=False), n, out.shape)
    return out


def mahalanobis_sq(d: np.ndarray, xi: KroneckerScale) -> float:
    """``vec(D)^T (Sigma_M^{-1} (x) ... (x) Sigma_1^{-1}) vec(D)`` via mode-wise whitening."""
    d = np.asarray(d, dtype=float)
    if d.shape != xi.dims:
        raise ValueError(f"tensor dims {d.shape} do not match scale dims {xi.dims}")
    z = whiten(d, xi.cholesky())
    return float(np.dot(z.ravel(), z.ravel()))


def mahalanobis_sq_batch(r: np.ndarray, xi: KroneckerScale, precisions=None) -> np.ndarray:
    """Squared Mahalanobis norms of the samples in ``r`` (shape ``dims + (n,)``).

    Uses ``<R_i, [[R_i; Sigma_1^{-1}, ..., Sigma_M^{-1}]]>``; pass
    ``precisions`` to reuse already computed inverses.
    """
    r = np.asarray(r, dtype=float)
    if r.shape[:-1] != xi.dims:
        raise ValueError(f"residual dims {r.shape[:-1]} do not match scale dims {xi.dims}")
    prec = xi.inverses() if precisions is None else precisions
    t = tucker(r, prec)
    n = r.shape[-1]
    return np.einsum("ji,ji->i", r.reshape(-1, n), t.reshape(-1, n))
