"""Compiled coordinate-descent kernels for penalized weighted least squares.

The smooth part is ``0.5 * tr(B^T Omega B Sxx) - tr(B^T Omega Syx)`` with
``B`` of shape ``(p, q)`` and ``Omega`` the Kronecker product of the
precision factors.  ``G = Omega (Syx - B Sxx)`` (the negative gradient)
is maintained in place.  Precision factors are passed flattened
(column-major per factor) with their offsets so that a column of
``Omega`` can be formed without materializing it.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def omega_column(pflat, offsets, dims, col, out):
    """Column ``col`` of ``P_M (x) ... (x) P_1`` written into ``out``."""
    length = 1
    rem = col
    for m in range(dims.shape[0]):
        pm = dims[m]
        jm = rem % pm
        rem //= pm
        base = offsets[m] + jm * pm
        if m == 0:
            for i in range(pm):
                out[i] = pflat[base + i]
            length = pm
        else:
            # expand in place from the back so that earlier entries are still unread
            for b in range(pm - 1, -1, -1):
                f = pflat[base + b]
                for a in range(length - 1, -1, -1):
                    out[a + length * b] = out[a] * f
            length *= pm
    return length


@njit(cache=True)
def _apply_delta(G, Sxx, k, delta, pflat, offsets, dims, J, identity, colbuf):
    p, q = G.shape
    if identity:
        for l in range(q):
            G[J, l] -= delta * Sxx[k, l]
        return
    omega_column(pflat, offsets, dims, J, colbuf)
    for l in range(q):
        s = delta * Sxx[k, l]
        if s != 0.0:
            for i in range(p):
                G[i, l] -= colbuf[i] * s


@njit(cache=True)
def _lasso_sweep(B, G, Sxx, odiag, thr, pflat, offsets, dims, identity, active_only, scaled, colbuf):
    p, q = B.shape
    worst = 0.0
    for J in range(p):
        for k in range(q):
            t = thr[J, k]
            b = B[J, k]
            if active_only and b == 0.0:
                continue
            if np.isinf(t):
                if b != 0.0:
                    _apply_delta(G, Sxx, k, -b, pflat, offsets, dims, J, identity, colbuf)
                    B[J, k] = 0.0
                continue
            curv = odiag[J] * Sxx[k, k]
            if curv <= 0.0:
                continue
            u1 = G[J, k] + curv * b
            if u1 > t:
                new = (u1 - t) / curv
            elif u1 < -t:
                new = (u1 + t) / curv
            else:
                new = 0.0
            delta = new - b
            if delta != 0.0:
                _apply_delta(G, Sxx, k, delta, pflat, offsets, dims, J, identity, colbuf)
                B[J, k] = new
                chg = abs(delta) * curv if scaled else abs(delta)
                if chg > worst:
                    worst = chg
    return worst


@njit(cache=True)
def lasso_cd(B, G, Sxx, odiag, thr, pflat, offsets, dims, identity, tol, max_sweeps, scaled=True):
    """Cyclic coordinate descent with soft-thresholding at ``thr``.

    Alternates full sweeps with active-set sweeps; stops when a full sweep
    moves no coordinate by more than ``tol``, measured in gradient units
    when ``scaled`` and as a raw coefficient change otherwise.  Returns
    the number of sweeps used.
    """
    colbuf = np.empty(B.shape[0])
    sweeps = 0
    while sweeps < max_sweeps:
        worst = _lasso_sweep(B, G, Sxx, odiag, thr, pflat, offsets, dims, identity, False, scaled, colbuf)
        sweeps += 1
        if worst < tol:
            break
        while sweeps < max_sweeps:
            worst = _lasso_sweep(B, G, Sxx, odiag, thr, pflat, offsets, dims, identity, True, scaled, colbuf)
            sweeps += 1
            if worst < tol:
                break
    return sweeps


@njit(cache=True)
def _group_sweep(B, G, Sxx, hfac, odiag, thr, pflat, offsets, dims, identity, active_only, scaled, colbuf, delta):
    p, q = B.shape
    worst = 0.0
    for J in range(p):
        t = thr[J]
        nrm_b = 0.0
        for k in range(q):
            nrm_b += B[J, k] * B[J, k]
        if active_only and nrm_b == 0.0:
            continue
        h = odiag[J] * hfac
        if np.isinf(t):
            shrink = 0.0
            znorm = 1.0
        else:
            znorm = 0.0
            for k in range(q):
                z = G[J, k] + h * B[J, k]
                znorm += z * z
            znorm = np.sqrt(znorm)
            shrink = 1.0 - t / znorm if znorm > t else 0.0
        moved = 0.0
        for k in range(q):
            new = (G[J, k] + h * B[J, k]) / h * shrink if shrink > 0.0 else 0.0
            delta[k] = new - B[J, k]
            if delta[k] != 0.0:
                moved = max(moved, abs(delta[k]) * h if scaled else abs(delta[k]))
        if moved == 0.0:
            continue
        for k in range(q):
            if delta[k] != 0.0:
                _apply_delta(G, Sxx, k, delta[k], pflat, offsets, dims, J, identity, colbuf)
                B[J, k] += delta[k]
        if moved > worst:
            worst = moved
    return worst


@njit(cache=True)
def group_gmd(B, G, Sxx, hfac, odiag, thr, pflat, offsets, dims, identity, tol, max_sweeps, scaled=True):
    """Groupwise majorization descent over the rows of ``B`` (one group per response cell)."""
    colbuf = np.empty(B.shape[0])
    delta = np.empty(B.shape[1])
    sweeps = 0
    while sweeps < max_sweeps:
        worst = _group_sweep(B, G, Sxx, hfac, odiag, thr, pflat, offsets, dims, identity, False, scaled, colbuf, delta)
        sweeps += 1
        if worst < tol:
            break
        while sweeps < max_sweeps:
            worst = _group_sweep(B, G, Sxx, hfac, odiag, thr, pflat, offsets, dims, identity, True, scaled, colbuf, delta)
            sweeps += 1
            if worst < tol:
                break
    return sweeps
