"""Connection and curvature of a metric field.

Sign conventions: ``R_ijkl = <R(d_i, d_j) d_l, d_k>`` so that ``R_ijij`` is
the sectional curvature of the (i, j) plane times ``|d_i ^ d_j|^2``; Ricci
is ``R_jl = g^ik R_ijkl``; the round unit sphere has ``Ric = (n-1) g``.

Riemann-type tensors are carried as symmetric bivector matrices (see
:mod:`locflow.grid`), which keeps 4D curvature at 21 stored components per
node.  Pointwise algebra that needs all four indices runs over chunks of
the first grid axis to bound memory.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .grid import (
    GridError,
    MetricField,
    ScalarField,
    TensorField,
    bivector_inverse_metric,
    bivector_pairs,
    grid_diff,
    gradient_array,
    pointwise_tensor_norm,
    sym_index,
    sym_pack,
    sym_unpack,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class CurvaturePack:
    christoffel: TensorField
    riemann: TensorField
    ricci: TensorField
    scalar: ScalarField
    weyl: TensorField | None = None
    weyl_plus: TensorField | None = None
    weyl_minus: TensorField | None = None
    bach: TensorField | None = None
    bach_self_dual: TensorField | None = None


def _christoffel_array(g: MetricField) -> np.ndarray:
    n = g.dimension
    dg = gradient_array(g.grid, g.components)[..., sym_index(n)]  # [k, i, j] = d_k g_ij
    # first kind: C[l, j, k] = 1/2 (d_k g_jl + d_j g_kl - d_l g_jk)
    first = 0.5 * (
        np.einsum("...kjl->...ljk", dg) + np.einsum("...jkl->...ljk", dg) - dg
    )
    return np.einsum("...il,...ljk->...ijk", g.inverse, first)


def christoffel(g: MetricField) -> TensorField:
    """``Gamma^i_jk = 1/2 g^il (d_k g_jl + d_j g_kl - d_l g_jk)``."""
    gam = _christoffel_array(g)
    return TensorField.from_full(g.grid, gam, ("u", "d", "d"), ((1, 2),))


def _metric_derivatives(g: MetricField):
    """Packed metric, its first derivatives ``[k]`` and second derivatives
    ``[pidx[a, b]]``, plus the packing tables."""
    grid = g.grid
    n = grid.dimension
    comps = np.ascontiguousarray(g.components)
    dgp = np.empty((n,) + comps.shape)
    for a in range(n):
        grid_diff(grid, comps, a, out=dgp[a])
    pidx = np.zeros((n, n), dtype=np.int64)
    ddgp = np.empty((n * (n + 1) // 2,) + comps.shape)
    slot = 0
    for a in range(n):
        for b in range(a, n):
            pidx[a, b] = pidx[b, a] = slot
            if a == b:
                grid_diff(grid, comps, a, order=2, out=ddgp[slot])
            else:
                grid_diff(grid, dgp[b], a, out=ddgp[slot])
            slot += 1
    sidx = np.ascontiguousarray(sym_index(n), dtype=np.int64)
    return comps, dgp, ddgp, sidx, pidx


def riemann(g: MetricField) -> TensorField:
    """All-covariant Riemann tensor with exact Riemann-type storage symmetry.

    ``R_iklm = 1/2 (d_k d_l g_im + d_i d_m g_kl - d_k d_m g_il - d_i d_l g_km)
    + g_np (Gamma^n_kl Gamma^p_im - Gamma^n_km Gamma^p_il)``, assembled per
    node from finite-difference metric derivatives.
    """
    grid = g.grid
    n = grid.dimension
    comps, dgp, ddgp, sidx, pidx = _metric_derivatives(g)
    npack = comps.shape[-1]
    pairs = bivector_pairs(n)
    pi = np.array([p[0] for p in pairs], dtype=np.int64)
    pk = np.array([p[1] for p in pairs], dtype=np.int64)
    out = np.empty((grid.npoints, len(pairs), len(pairs)))
    _kernels.riemann_from_derivatives(comps.reshape(grid.npoints, npack),
                                      dgp.reshape(n, grid.npoints, npack),
                                      ddgp.reshape(-1, grid.npoints, npack), sidx, pidx, pi, pk, out)
    return TensorField.from_bivector(grid, out.reshape(grid.shape + out.shape[1:]))


def riemann_from_christoffel(g: MetricField, gamma: TensorField) -> TensorField:
    """Riemann tensor from derivatives of the connection.

    ``R^p_ijl = d_i Gamma^p_jl - d_j Gamma^p_il + Gamma^p_iq Gamma^q_jl
    - Gamma^p_jq Gamma^q_il`` lowered as ``R_ijkl = g_kp R^p_ijl``.  This
    route is memory hungry and exists as an independent cross-check of
    :func:`riemann`.
    """
    grid = g.grid
    gam = gamma.full()
    dgam = gradient_array(grid, gam)  # [i, p, j, l] = d_i Gamma^p_jl
    rup = (
        np.einsum("...ipjl->...pijl", dgam)
        - np.einsum("...jpil->...pijl", dgam)
        + np.einsum("...piq,...qjl->...pijl", gam, gam)
        - np.einsum("...pjq,...qil->...pijl", gam, gam)
    )
    full = np.einsum("...kp,...pijl->...ijkl", g.matrix, rup)
    return TensorField.from_full(grid, full, ("d", "d", "d", "d"), "riemann")


def ricci(g: MetricField, rm: TensorField) -> TensorField:
    """``R_km = g^il R_iklm``."""
    n = g.dimension
    idx, sgn = _kernels.pair_tables(n)
    nb = idx.max() + 1
    m = np.ascontiguousarray(rm.bivector()).reshape(-1, nb, nb)
    ginv = np.ascontiguousarray(g.inverse).reshape(-1, n, n)
    ric = np.empty((m.shape[0], n, n))
    _kernels.ricci_from_bivector(ginv, m, idx, sgn, ric)
    return TensorField.from_full(g.grid, ric.reshape(g.grid.shape + (n, n)), ("d", "d"), ((0, 1),))


def scalar_curvature(g: MetricField, ric: TensorField) -> ScalarField:
    return ScalarField(g.grid, np.einsum("...ij,...ij->...", g.inverse, ric.full()))


def ricci_tensor(g: MetricField) -> np.ndarray:
    """Dense Ricci tensor ``(..., n, n)`` of ``g``, fused path used by the flow.

    Same discretization as ``ricci(g, riemann(g))`` without materializing
    the curvature tensor.
    """
    grid = g.grid
    n = grid.dimension
    comps, dgp, ddgp, sidx, pidx = _metric_derivatives(g)
    npack = comps.shape[-1]
    out = np.empty((grid.npoints, n, n))
    _kernels.ricci_from_derivatives(comps.reshape(grid.npoints, npack),
                                    dgp.reshape(n, grid.npoints, npack),
                                    ddgp.reshape(-1, grid.npoints, npack), sidx, pidx, out)
    return out.reshape(grid.shape + (n, n))


def ricci_eigenvalues(g: MetricField, ric: TensorField) -> np.ndarray:
    """Eigenvalues of ``g^-1 Ric`` per node, ascending."""
    chol = np.linalg.cholesky(g.matrix)
    linv = np.linalg.inv(chol)
    sym = linv @ ric.full() @ np.swapaxes(linv, -1, -2)
    return np.linalg.eigvalsh(0.5 * (sym + np.swapaxes(sym, -1, -2)))


# --------------------------------------------------------------------------
# Weyl tensor and the Hodge star
# --------------------------------------------------------------------------


def kulkarni_nomizu_bivector(h: np.ndarray, k: np.ndarray) -> np.ndarray:
    """``(h o k)_ijkl = h_ik k_jl + h_jl k_ik - h_il k_jk - h_jk k_il`` on bivectors."""
    n = h.shape[-1]
    pairs = bivector_pairs(n)
    i = np.array([p[0] for p in pairs])[:, None]
    j = np.array([p[1] for p in pairs])[:, None]
    kk = np.array([p[0] for p in pairs])[None, :]
    ll = np.array([p[1] for p in pairs])[None, :]
    return (h[..., i, kk] * k[..., j, ll] + h[..., j, ll] * k[..., i, kk]
            - h[..., i, ll] * k[..., j, kk] - h[..., j, kk] * k[..., i, ll])


def _levi_civita_bivector(n: int) -> np.ndarray:
    pairs = bivector_pairs(n)
    e = np.zeros((len(pairs), len(pairs)))
    for a, p in enumerate(pairs):
        for b, q in enumerate(pairs):
            perm = p + q
            if len(set(perm)) == 4:
                e[a, b] = _perm_sign(perm)
    return e


def _perm_sign(perm) -> int:
    sign = 1
    perm = list(perm)
    for i, j in itertools.combinations(range(len(perm)), 2):
        if perm[i] > perm[j]:
            sign = -sign
    return sign


def hodge_star_bivector(g: MetricField) -> np.ndarray:
    """Matrix of the Hodge star on 2-forms (covariant bivector components), 4D only.

    Orientation is that of the chart, volume form ``sqrt(det g) dx^0...dx^3``.
    """
    if g.dimension != 4:
        raise GridError("the Hodge star on 2-forms is only split into +/- parts in dimension 4")
    e = _levi_civita_bivector(4)
    ginv_b = bivector_inverse_metric(g.inverse)
    return g.sqrt_det[..., None, None] * np.einsum("AD,...DC->...AC", e, ginv_b)


def weyl_decompose(g: MetricField, rm: TensorField, ric: TensorField, scal: ScalarField):
    """Weyl tensor and, in dimension 4, its self-dual and anti-self-dual parts.

    Returns ``(W, W_plus, W_minus)``; the last two are ``None`` unless
    ``g.dimension == 4``.
    """
    n = g.dimension
    if n < 3:
        raise GridError("the Weyl tensor needs dimension >= 3")
    gm = g.matrix
    ricf = ric.full()
    r = scal.values[..., None, None]
    w = (rm.bivector()
         - kulkarni_nomizu_bivector(ricf, gm) / (n - 2)
         + r * kulkarni_nomizu_bivector(gm, gm) / (2.0 * (n - 1) * (n - 2)))
    weyl = TensorField.from_bivector(g.grid, w)
    if n != 4:
        return weyl, None, None
    star = hodge_star_bivector(g)
    sw = np.matmul(star, weyl.bivector())
    wp = TensorField.from_bivector(g.grid, 0.5 * (weyl.bivector() + sw))
    wm = TensorField.from_bivector(g.grid, 0.5 * (weyl.bivector() - sw))
    return weyl, wp, wm


def weyl_plus_minus(g: MetricField, pack: CurvaturePack):
    return weyl_decompose(g, pack.riemann, pack.ricci, pack.scalar)


# --------------------------------------------------------------------------
# Bach tensor
# --------------------------------------------------------------------------


def _flat(a: np.ndarray, grid) -> np.ndarray:
    return np.ascontiguousarray(a.reshape((grid.npoints,) + a.shape[grid.dimension:]))


def _weyl_divergence(g: MetricField, gam: np.ndarray, w: TensorField) -> np.ndarray:
    """``D_ikj = g^lm nabla_m W_ikjl`` for a Riemann-type tensor ``W``."""
    grid = g.grid
    n = grid.dimension
    idx, sgn = _kernels.pair_tables(n)
    wb = w.bivector()
    ginv = _flat(g.inverse, grid)
    out = np.zeros((grid.npoints, n, n, n))
    for m in range(n):
        dwb = _flat(grid_diff(grid, wb, m), grid)
        _kernels.weyl_divergence_partial(ginv, dwb, m, idx, sgn, out)
    _kernels.weyl_divergence_connection(ginv, _flat(gam, grid), _flat(wb, grid), idx, sgn, out)
    return out.reshape(grid.shape + (n, n, n))


def _double_divergence(g: MetricField, gam: np.ndarray, w: TensorField) -> np.ndarray:
    """``nabla^k nabla^l W_ikjl`` (not symmetrized)."""
    grid = g.grid
    n = grid.dimension
    d = _weyl_divergence(g, gam, w)
    ginv = _flat(g.inverse, grid)
    out = np.zeros((grid.npoints, n, n))
    for m in range(n):
        _kernels.divergence_partial(ginv, _flat(grid_diff(grid, d, m), grid), m, out)
    _kernels.divergence_connection(ginv, _flat(gam, grid), _flat(d, grid), out)
    return out.reshape(grid.shape + (n, n))


def _contract_pairs(g: MetricField, sym: np.ndarray, rm: TensorField) -> np.ndarray:
    """``S^kl R_ikjl`` for a contravariant symmetric ``S``."""
    grid = g.grid
    n = grid.dimension
    idx, sgn = _kernels.pair_tables(n)
    out = np.empty((grid.npoints, n, n))
    _kernels.contract_pairs(_flat(sym, grid), _flat(rm.bivector(), grid), idx, sgn, out)
    return out.reshape(grid.shape + (n, n))


def _ricci_weyl_contraction(g: MetricField, ric: TensorField, w: TensorField) -> np.ndarray:
    """``R^kl W_ikjl``."""
    ginv = g.inverse
    rup = np.einsum("...ka,...ab,...lb->...kl", ginv, ric.full(), ginv)
    return _contract_pairs(g, rup, w)


def bach(g: MetricField, pack: CurvaturePack):
    """Bach tensor in its full-Weyl and self-dual forms.

    Returns ``(B, B_sd)`` with ``B_ij = nabla^k nabla^l W_ikjl + 1/2 R^kl W_ikjl``
    and ``B_sd_ij = 2 nabla^k nabla^l W+_ikjl + R^kl W+_ikjl``; both symmetrized.
    Classically the two coincide in dimension 4.
    """
    if g.dimension != 4:
        raise GridError("the Bach tensor is only computed in dimension 4")
    weyl, wp = pack.weyl, pack.weyl_plus
    if weyl is None or wp is None:
        weyl, wp, _ = weyl_plus_minus(g, pack)
    gam = pack.christoffel.full()
    b = _double_divergence(g, gam, weyl) + 0.5 * _ricci_weyl_contraction(g, pack.ricci, weyl)
    bsd = 2.0 * _double_divergence(g, gam, wp) + _ricci_weyl_contraction(g, pack.ricci, wp)
    grid = g.grid
    return (TensorField.from_full(grid, b, ("d", "d"), ((0, 1),)),
            TensorField.from_full(grid, bsd, ("d", "d"), ((0, 1),)))


def bach_agreement(g: MetricField, pack: CurvaturePack, mask=None) -> dict:
    """Sup-norm gap between the two Bach forms relative to the problem scale.

    The scale is ``max(sup|B|, sup|Rm|^2)``: Bach carries two powers of
    curvature, and on metrics where it vanishes ``|Rm|^2`` is what the
    discretization error is measured against.
    """
    if pack.bach is None or pack.bach_self_dual is None:
        raise GridError("the pack carries no Bach tensor")
    diff = TensorField.from_full(g.grid, pack.bach.full() - pack.bach_self_dual.full(),
                                 ("d", "d"), ((0, 1),))
    gap = tensor_sup(diff, g, mask)
    scale = max(tensor_sup(pack.bach, g, mask), tensor_sup(pack.bach_self_dual, g, mask),
                tensor_sup(pack.riemann, g, mask) ** 2)
    return {"difference": gap, "scale": scale, "ratio": gap / scale if scale > 0 else 0.0}


def curvature_pack(g: MetricField, with_bach: bool = True) -> CurvaturePack:
    """Christoffel symbols, Riemann, Ricci, scalar curvature, Weyl and Bach."""
    gamma = christoffel(g)
    rm = riemann(g)
    ric = ricci(g, rm)
    scal = scalar_curvature(g, ric)
    if g.dimension < 3:
        return CurvaturePack(gamma, rm, ric, scal)
    weyl, wp, wm = weyl_decompose(g, rm, ric, scal)
    pack = CurvaturePack(gamma, rm, ric, scal, weyl, wp, wm)
    if g.dimension == 4 and with_bach:
        b, bsd = bach(g, pack)
        pack = CurvaturePack(gamma, rm, ric, scal, weyl, wp, wm, b, bsd)
    return pack


# --------------------------------------------------------------------------
# elliptic system for Ricci
# --------------------------------------------------------------------------


def rough_laplacian_sym2(g: MetricField, gam: np.ndarray, t: np.ndarray) -> np.ndarray:
    """``g^ab nabla_a nabla_b T_ij`` for a covariant 2-tensor ``T``."""
    grid = g.grid
    n = grid.dimension
    ginv = g.inverse
    dt = gradient_array(grid, t)  # [b, i, j]
    e = (dt - np.einsum("...sbi,...sj->...bij", gam, t)
         - np.einsum("...sbj,...is->...bij", gam, t))
    out = np.zeros(grid.shape + (n, n))
    for a in range(n):
        out += np.einsum("...b,...bij->...ij", ginv[..., a, :], grid_diff(grid, e, a))
    lam = np.einsum("...ba,...sai->...bsi", ginv, gam)
    gcon = np.einsum("...ab,...sab->...s", ginv, gam)
    out -= np.einsum("...s,...sij->...ij", gcon, e)
    out -= np.einsum("...bsi,...bsj->...ij", lam, e)
    out -= np.einsum("...bsj,...bis->...ij", lam, e)
    return out


def rm_star_ric(g: MetricField, rm: TensorField, ric: TensorField) -> np.ndarray:
    """``2 R_kilj R^kl - 2 R_ik R^k_j``; vanishes on Einstein metrics."""
    ginv = g.inverse
    ricf = ric.full()
    # R_kilj = R_ikjl by the pair antisymmetries
    first = _ricci_weyl_contraction(g, ric, rm)
    mixed = np.einsum("...ik,...ka,...aj->...ij", ricf, ginv, ricf)
    return 2.0 * first - 2.0 * mixed


def elliptic_residual(g: MetricField, pack: CurvaturePack, b: TensorField | None = None) -> ScalarField:
    """Pointwise norm of ``Delta Ric - Rm*Ric - B`` (report-only diagnostic)."""
    if g.dimension != 4:
        raise GridError("the elliptic residual is defined in dimension 4")
    b = pack.bach if b is None else b
    if b is None:
        b, _ = bach(g, pack)
    gam = pack.christoffel.full()
    lap = rough_laplacian_sym2(g, gam, pack.ricci.full())
    res = lap - rm_star_ric(g, pack.riemann, pack.ricci) - b.full()
    ginv = g.inverse
    sq = np.einsum("...ia,...jb,...ij,...ab->...", ginv, ginv, res, res)
    return ScalarField(g.grid, np.sqrt(np.maximum(sq, 0.0)))


def covariant_derivative_sym2(g: MetricField, gam: np.ndarray, t: np.ndarray) -> np.ndarray:
    """``nabla_b T_ij`` with the derivative index first after the grid axes."""
    dt = gradient_array(g.grid, t)
    return (dt - np.einsum("...sbi,...sj->...bij", gam, t)
            - np.einsum("...sbj,...is->...bij", gam, t))


def contracted_bianchi_defect(g: MetricField, pack: CurvaturePack) -> np.ndarray:
    """``nabla^j R_ij - 1/2 d_i R`` per node (vanishes for exact curvature)."""
    gam = pack.christoffel.full()
    nab = covariant_derivative_sym2(g, gam, pack.ricci.full())
    div = np.einsum("...bj,...bij->...i", g.inverse, nab)
    ds = gradient_array(g.grid, pack.scalar.values)
    return div - 0.5 * ds


def tensor_sup(t: TensorField, g: MetricField, mask=None) -> float:
    vals = pointwise_tensor_norm(t, g).values
    if mask is not None:
        vals = vals[mask]
    return float(np.max(vals)) if vals.size else 0.0


__all__ = [
    "CurvaturePack",
    "bach",
    "bach_agreement",
    "christoffel",
    "curvature_pack",
    "elliptic_residual",
    "ricci",
    "riemann",
    "riemann_from_christoffel",
    "scalar_curvature",
    "weyl_decompose",
    "sym_pack",
    "sym_unpack",
]
