"""Compiled stencils and per-node tensor contractions.

All kernels take node-flattened, C-contiguous arrays (leading axis = node).
Riemann-type inputs stay in bivector form and are expanded per node with a
pair lookup table, so no four-index field is ever materialized.
"""
from __future__ import annotations

import itertools
from functools import lru_cache

import numpy as np
from numba import njit


@lru_cache(maxsize=None)
def pair_tables(n: int):
    """``idx[i, j]`` bivector slot of (i, j) and ``sgn[i, j]`` in {-1, 0, 1}."""
    idx = np.zeros((n, n), dtype=np.int64)
    sgn = np.zeros((n, n))
    for a, (i, j) in enumerate(itertools.combinations(range(n), 2)):
        idx[i, j] = idx[j, i] = a
        sgn[i, j], sgn[j, i] = 1.0, -1.0
    idx.flags.writeable = False
    sgn.flags.writeable = False
    return idx, sgn


@njit(cache=True)
def _expand(wb, idx, sgn, out):
    n = idx.shape[0]
    for i in range(n):
        for j in range(n):
            sij = sgn[i, j]
            a = idx[i, j]
            for k in range(n):
                for l in range(n):
                    s = sij * sgn[k, l]
                    out[i, j, k, l] = s * wb[a, idx[k, l]] if s != 0.0 else 0.0


@njit(cache=True)
def weyl_divergence_partial(ginv, dwb, m, idx, sgn, out):
    """``out[i,k,j] += g^lm d_m W_ikjl`` for one derivative direction ``m``."""
    npts = out.shape[0]
    n = idx.shape[0]
    wf = np.empty((n, n, n, n))
    for p in range(npts):
        _expand(dwb[p], idx, sgn, wf)
        for i in range(n):
            for k in range(n):
                for j in range(n):
                    acc = 0.0
                    for l in range(n):
                        acc += ginv[p, l, m] * wf[i, k, j, l]
                    out[p, i, k, j] += acc


@njit(cache=True)
def weyl_divergence_connection(ginv, gam, wb, idx, sgn, out):
    """Subtract the connection terms of ``g^lm nabla_m W_ikjl`` from ``out``."""
    npts = out.shape[0]
    n = idx.shape[0]
    wf = np.empty((n, n, n, n))
    lam = np.empty((n, n, n))
    gcon = np.empty(n)
    for p in range(npts):
        _expand(wb[p], idx, sgn, wf)
        for l in range(n):
            for s in range(n):
                for i in range(n):
                    acc = 0.0
                    for m in range(n):
                        acc += ginv[p, l, m] * gam[p, s, m, i]
                    lam[l, s, i] = acc
        for s in range(n):
            acc = 0.0
            for l in range(n):
                for m in range(n):
                    acc += ginv[p, l, m] * gam[p, s, m, l]
            gcon[s] = acc
        for i in range(n):
            for k in range(n):
                for j in range(n):
                    acc = 0.0
                    for l in range(n):
                        for s in range(n):
                            acc += (lam[l, s, i] * wf[s, k, j, l]
                                    + lam[l, s, k] * wf[i, s, j, l]
                                    + lam[l, s, j] * wf[i, k, s, l])
                    for s in range(n):
                        acc += gcon[s] * wf[i, k, j, s]
                    out[p, i, k, j] -= acc


@njit(cache=True)
def divergence_partial(ginv, dd, m, out):
    """``out[i,j] += g^km d_m D_ikj`` for one direction ``m``."""
    npts = out.shape[0]
    n = out.shape[1]
    for p in range(npts):
        for i in range(n):
            for j in range(n):
                acc = 0.0
                for k in range(n):
                    acc += ginv[p, k, m] * dd[p, i, k, j]
                out[p, i, j] += acc


@njit(cache=True)
def divergence_connection(ginv, gam, d, out):
    """Subtract ``g^km (Gamma^s_mi D_skj + Gamma^s_mk D_isj + Gamma^s_mj D_iks)``."""
    npts = out.shape[0]
    n = out.shape[1]
    lam = np.empty((n, n, n))
    gcon = np.empty(n)
    for p in range(npts):
        for k in range(n):
            for s in range(n):
                for i in range(n):
                    acc = 0.0
                    for m in range(n):
                        acc += ginv[p, k, m] * gam[p, s, m, i]
                    lam[k, s, i] = acc
        for s in range(n):
            acc = 0.0
            for k in range(n):
                for m in range(n):
                    acc += ginv[p, k, m] * gam[p, s, m, k]
            gcon[s] = acc
        for i in range(n):
            for j in range(n):
                acc = 0.0
                for k in range(n):
                    for s in range(n):
                        acc += lam[k, s, i] * d[p, s, k, j] + lam[k, s, j] * d[p, i, k, s]
                for s in range(n):
                    acc += gcon[s] * d[p, i, s, j]
                out[p, i, j] -= acc


@njit(cache=True)
def contract_pairs(sym, wb, idx, sgn, out):
    """``out[i,j] = sym^kl W_ikjl``."""
    npts = out.shape[0]
    n = out.shape[1]
    wf = np.empty((n, n, n, n))
    for p in range(npts):
        _expand(wb[p], idx, sgn, wf)
        for i in range(n):
            for j in range(n):
                acc = 0.0
                for k in range(n):
                    for l in range(n):
                        acc += sym[p, k, l] * wf[i, k, j, l]
                out[p, i, j] = acc


@njit(cache=True)
def ricci_from_bivector(ginv, m, idx, sgn, out):
    """``out[k, l] = g^ij R_ikjl`` with Riemann in bivector form."""
    n = idx.shape[0]
    for p in range(m.shape[0]):
        for k in range(n):
            for l in range(k, n):
                acc = 0.0
                for i in range(n):
                    sik = sgn[i, k]
                    if sik == 0.0:
                        continue
                    a = idx[i, k]
                    for j in range(n):
                        sjl = sgn[j, l]
                        if sjl != 0.0:
                            acc += ginv[p, i, j] * sik * sjl * m[p, a, idx[j, l]]
                out[p, k, l] = acc
                out[p, l, k] = acc


@njit(cache=True)
def _unpack(packed, sidx, out):
    n = sidx.shape[0]
    for i in range(n):
        for j in range(n):
            out[i, j] = packed[sidx[i, j]]


@njit(cache=True)
def _inv_spd(a, work, out):
    """Gauss-Jordan inverse without pivoting (safe for positive-definite ``a``)."""
    n = a.shape[0]
    work[:, :] = a
    for i in range(n):
        for j in range(n):
            out[i, j] = 1.0 if i == j else 0.0
    for c in range(n):
        piv = 1.0 / work[c, c]
        for j in range(n):
            work[c, j] *= piv
            out[c, j] *= piv
        for r in range(n):
            if r != c:
                f = work[r, c]
                if f != 0.0:
                    for j in range(n):
                        work[r, j] -= f * work[c, j]
                        out[r, j] -= f * out[c, j]


@njit(cache=True)
def riemann_from_derivatives(gp, dgp, ddgp, sidx, pidx, pi, pk, out):
    """Riemann bivector matrix from packed metric values and derivatives.

    Inputs as in :func:`ricci_from_derivatives`; ``(pi[A], pk[A])`` is pair A.
    ``R_iklm = 1/2 (g_im,kl + g_kl,im - g_il,km - g_km,il)
    + G^n_kl G_n,im - G^n_km G_n,il`` with ``G_n,im`` of the first kind.
    """
    npts = gp.shape[0]
    n = sidx.shape[0]
    nb = pi.shape[0]
    g = np.empty((n, n))
    ginv = np.empty((n, n))
    work = np.empty((n, n))
    dg = np.empty((n, n, n))
    first = np.empty((n, n, n))
    gam = np.empty((n, n, n))
    raw = np.empty((nb, nb))
    for p in range(npts):
        _unpack(gp[p], sidx, g)
        _inv_spd(g, work, ginv)
        for k in range(n):
            _unpack(dgp[k, p], sidx, dg[k])
        for l in range(n):
            for j in range(n):
                for k in range(n):
                    first[l, j, k] = 0.5 * (dg[k, j, l] + dg[j, k, l] - dg[l, j, k])
        for i in range(n):
            for j in range(n):
                for k in range(j, n):
                    acc = 0.0
                    for l in range(n):
                        acc += ginv[i, l] * first[l, j, k]
                    gam[i, j, k] = acc
                    gam[i, k, j] = acc
        for a in range(nb):
            i = pi[a]
            k = pk[a]
            for b in range(nb):
                l = pi[b]
                m = pk[b]
                val = 0.5 * (ddgp[pidx[k, l], p, sidx[i, m]] + ddgp[pidx[i, m], p, sidx[k, l]]
                             - ddgp[pidx[k, m], p, sidx[i, l]] - ddgp[pidx[i, l], p, sidx[k, m]])
                for q in range(n):
                    val += gam[q, k, l] * first[q, i, m] - gam[q, k, m] * first[q, i, l]
                raw[a, b] = val
        for a in range(nb):
            for b in range(a, nb):
                sym = 0.5 * (raw[a, b] + raw[b, a])
                out[p, a, b] = sym
                out[p, b, a] = sym


@njit(cache=True)
def ricci_from_derivatives(gp, dgp, ddgp, sidx, pidx, out):
    """Ricci tensor from packed metric values and their derivatives.

    ``gp[p, c]`` packed metric, ``dgp[k, p, c] = d_k g``, ``ddgp[P, p, c] =
    d_a d_b g`` with ``P = pidx[a, b]``.  Contracting
    ``R_iklm = 1/2 (g_im,kl + g_kl,im - g_il,km - g_km,il)
    + g_np (G^n_kl G^p_im - G^n_km G^p_il)`` with ``g^il`` gives
    ``R_km = 1/2 (A_km + A_mk - C_km - D_km) + G^s_kl M_slm - G^s_km c_s``.
    """
    npts = gp.shape[0]
    n = sidx.shape[0]
    g = np.empty((n, n))
    ginv = np.empty((n, n))
    work = np.empty((n, n))
    dg = np.empty((n, n, n))
    first = np.empty((n, n, n))
    gam = np.empty((n, n, n))
    mm = np.empty((n, n, n))
    cs = np.empty(n)
    amat = np.empty((n, n))
    for p in range(npts):
        _unpack(gp[p], sidx, g)
        _inv_spd(g, work, ginv)
        for i in range(n):
            for j in range(i):
                sym = 0.5 * (ginv[i, j] + ginv[j, i])
                ginv[i, j] = sym
                ginv[j, i] = sym
        for k in range(n):
            _unpack(dgp[k, p], sidx, dg[k])
        for l in range(n):
            for j in range(n):
                for k in range(n):
                    first[l, j, k] = 0.5 * (dg[k, j, l] + dg[j, k, l] - dg[l, j, k])
        for i in range(n):
            for j in range(n):
                for k in range(j, n):
                    acc = 0.0
                    for l in range(n):
                        acc += ginv[i, l] * first[l, j, k]
                    gam[i, j, k] = acc
                    gam[i, k, j] = acc
        # M[s, l, m] = g^il G_s,im ; c_s = g^il G_s,il
        for s in range(n):
            cacc = 0.0
            for l in range(n):
                for m in range(n):
                    acc = 0.0
                    for i in range(n):
                        acc += ginv[i, l] * first[s, i, m]
                    mm[s, l, m] = acc
                cacc += mm[s, l, l]
            cs[s] = cacc
        # A[k, m] = g^il d_k d_l g_im
        for k in range(n):
            for m in range(n):
                acc = 0.0
                for i in range(n):
                    cim = sidx[i, m]
                    for l in range(n):
                        acc += ginv[i, l] * ddgp[pidx[k, l], p, cim]
                amat[k, m] = acc
        for k in range(n):
            for m in range(k, n):
                pkm = pidx[k, m]
                ckm = sidx[k, m]
                trace = 0.0
                lap = 0.0
                for i in range(n):
                    for l in range(n):
                        gil = ginv[i, l]
                        trace += gil * ddgp[pkm, p, sidx[i, l]]
                        lap += gil * ddgp[pidx[i, l], p, ckm]
                quad = 0.0
                for s in range(n):
                    for l in range(n):
                        quad += gam[s, k, l] * mm[s, l, m]
                    quad -= gam[s, k, m] * cs[s]
                val = 0.5 * (amat[k, m] + amat[m, k] - trace - lap) + quad
                out[p, k, m] = val
                out[p, m, k] = val


@njit(cache=True)
def diff_axis(a, h, order, periodic, out):
    """Derivative along the middle axis of ``a[pre, n, post]`` (see grid.diff)."""
    pre, n, post = a.shape
    if order == 1:
        c = 1.0 / (12.0 * h)
        for i in range(pre):
            for j in range(n):
                if periodic or (2 <= j < n - 2):
                    jm2 = (j - 2) % n
                    jm1 = (j - 1) % n
                    jp1 = (j + 1) % n
                    jp2 = (j + 2) % n
                    for k in range(post):
                        out[i, j, k] = c * (a[i, jm2, k] - a[i, jp2, k] + 8.0 * (a[i, jp1, k] - a[i, jm1, k]))
                elif j == 0:
                    for k in range(post):
                        out[i, j, k] = (-3.0 * a[i, 0, k] + 4.0 * a[i, 1, k] - a[i, 2, k]) / (2.0 * h)
                elif j == n - 1:
                    for k in range(post):
                        out[i, j, k] = (3.0 * a[i, n - 1, k] - 4.0 * a[i, n - 2, k] + a[i, n - 3, k]) / (2.0 * h)
                else:
                    for k in range(post):
                        out[i, j, k] = (a[i, j + 1, k] - a[i, j - 1, k]) / (2.0 * h)
    else:
        c = 1.0 / (12.0 * h * h)
        h2 = h * h
        for i in range(pre):
            for j in range(n):
                if periodic or (2 <= j < n - 2):
                    jm2 = (j - 2) % n
                    jm1 = (j - 1) % n
                    jp1 = (j + 1) % n
                    jp2 = (j + 2) % n
                    for k in range(post):
                        out[i, j, k] = c * (16.0 * (a[i, jm1, k] + a[i, jp1, k])
                                            - (a[i, jm2, k] + a[i, jp2, k]) - 30.0 * a[i, j, k])
                elif j == 0:
                    for k in range(post):
                        out[i, j, k] = (2.0 * a[i, 0, k] - 5.0 * a[i, 1, k] + 4.0 * a[i, 2, k] - a[i, 3, k]) / h2
                elif j == n - 1:
                    for k in range(post):
                        out[i, j, k] = (2.0 * a[i, n - 1, k] - 5.0 * a[i, n - 2, k]
                                        + 4.0 * a[i, n - 3, k] - a[i, n - 4, k]) / h2
                else:
                    for k in range(post):
                        out[i, j, k] = (a[i, j - 1, k] - 2.0 * a[i, j, k] + a[i, j + 1, k]) / h2
