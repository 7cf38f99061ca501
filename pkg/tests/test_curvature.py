from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
import sympy as sp
from scipy.ndimage import map_coordinates

from locflow.curvature import (
    bach_agreement,
    christoffel,
    contracted_bianchi_defect,
    curvature_pack,
    elliptic_residual,
    ricci,
    ricci_eigenvalues,
    riemann,
    riemann_from_christoffel,
    scalar_curvature,
    tensor_sup,
    weyl_decompose,
)
from locflow.grid import (
    ChartGrid,
    GridError,
    MetricField,
    ScalarField,
    TensorField,
    gradient_array,
    pointwise_tensor_norm,
)
from locflow.scenarios import build_scenario, default_grid

import oracles
from conftest import torus


def _fitted_order(errors, spacings):
    return [math.log(errors[i] / errors[i + 1]) / math.log(spacings[i] / spacings[i + 1])
            for i in range(len(errors) - 1)]


def _core(grid: ChartGrid, half_width: float = 0.5) -> np.ndarray:
    """Nodes of a frozen chart in the fixed box ``|x|_inf <= half_width``."""
    x = grid.mesh(sparse=False)
    return np.max(np.abs(np.asarray(x)), axis=0) <= half_width + 1e-9


# --- flat and closed-form oracles ------------------------------------------


def test_flat_curvature_vanishes():
    grid = torus(4, 8)
    pack = curvature_pack(MetricField.flat(grid))
    for t in (pack.christoffel, pack.riemann, pack.ricci, pack.weyl, pack.weyl_plus, pack.bach,
              pack.bach_self_dual):
        assert np.max(np.abs(t.components)) <= 1e-10
    assert np.max(np.abs(pack.scalar.values)) <= 1e-10
    assert np.max(elliptic_residual(MetricField.flat(grid), pack).values) <= 1e-10


def test_polar_christoffel_matches_symbolic():
    sc = build_scenario("polar_flat", grid=default_grid("polar_flat", n=33))
    gam = christoffel(sc.metric).full()
    ref = oracles.polar_flat().christoffel_on(sc.grid.mesh(sparse=False))
    assert np.max(np.abs(gam[..., 0, 1, 1] + sc.grid.mesh(sparse=False)[0])) <= 1e-6
    assert np.max(np.abs(gam[..., 1, 0, 1] - 1.0 / sc.grid.mesh(sparse=False)[0])) <= 1e-6
    assert np.max(np.abs(gam - ref)) <= 1e-6
    assert np.max(np.abs(scalar_curvature(sc.metric, ricci(sc.metric, riemann(sc.metric))).values)) <= 1e-6


def test_christoffel_symmetric_storage():
    sc = build_scenario("perturbed_flat", {"wavenumber": 1}, torus(3, 8))
    gam = christoffel(sc.metric).full()
    assert np.array_equal(gam, np.swapaxes(gam, -1, -2))


@pytest.mark.parametrize("n", [32, 64])
def test_conformal_christoffel_matches_symbolic(n):
    xs = oracles.symbols(3)
    u = sp.Rational(1, 10) * sp.sin(xs[0]) * sp.cos(xs[1]) + sp.Rational(1, 20) * sp.sin(xs[2])
    sym = oracles.conformal_metric(u, xs)
    grid = torus(3, n)
    mesh = grid.mesh(sparse=False)
    g = MetricField.from_matrix(grid, sym.metric_on(mesh))
    err = np.max(np.abs(christoffel(g).full() - sym.christoffel_on(mesh)))
    assert err <= 10 * grid.spacing[0] ** 4


def test_sphere_scalar_curvature_converges():
    errs, hs = [], []
    for n in (33, 65, 129):
        sc = build_scenario("sphere_stereo", {"dimension": 2}, ChartGrid.box(2, n, -1.0, 1.0))
        pack = curvature_pack(sc.metric)
        errs.append(np.max(np.abs(pack.scalar.values - 2.0)))
        hs.append(sc.grid.spacing[0])
    assert errs[-1] <= 0.01 * 2.0
    assert min(_fitted_order(errs, hs)) >= 1.9


def test_three_sphere_einstein_constant():
    sc = build_scenario("sphere_stereo", {"dimension": 3}, ChartGrid.box(3, 24, -1.0, 1.0))
    pack = curvature_pack(sc.metric)
    eig = ricci_eigenvalues(sc.metric, pack.ricci)[sc.grid.interior_mask()]
    assert np.max(np.abs(eig - 2.0)) <= 0.05 * 2.0


def test_riemann_matches_symbolic_non_conformal_metric():
    xs = oracles.symbols(3)
    mat = sp.eye(3) + sp.Rational(1, 10) * sp.Matrix([
        [sp.sin(xs[1]), sp.cos(xs[2]) / 2, 0],
        [sp.cos(xs[2]) / 2, sp.sin(xs[0] + xs[2]), sp.sin(xs[0]) / 3],
        [0, sp.sin(xs[0]) / 3, sp.cos(xs[0] - xs[1])],
    ])
    sym = oracles.SymbolicMetric(mat, xs)
    errs, hs = [], []
    for n in (16, 32):
        grid = torus(3, n)
        mesh = grid.mesh(sparse=False)
        g = MetricField.from_matrix(grid, sym.metric_on(mesh))
        errs.append(np.max(np.abs(riemann(g).full() - sym.riemann_on(mesh))))
        hs.append(grid.spacing[0])
    assert errs[-1] <= 1e-4
    assert _fitted_order(errs, hs)[0] >= 3.5


# --- symmetries and contractions -------------------------------------------


@pytest.mark.parametrize("dimension", [3, 4])
def test_riemann_symmetries(dimension):
    sc = build_scenario("perturbed_flat", {"wavenumber": 1, "amplitude": 0.1 / dimension},
                        torus(dimension, 12))
    rm = riemann(sc.metric).full()
    assert np.array_equal(rm, -np.swapaxes(rm, -4, -3))
    assert np.array_equal(rm, -np.swapaxes(rm, -2, -1))
    assert np.array_equal(rm, np.moveaxis(rm, (-4, -3), (-2, -1)))
    # first Bianchi: R_ijkl + R_iklj + R_iljk = 0 up to discretization
    bianchi = rm + np.einsum("...ijkl->...iklj", rm) + np.einsum("...ijkl->...iljk", rm)
    h = sc.grid.spacing[0]
    assert np.max(np.abs(bianchi)) <= 10 * h ** 2 * np.max(np.abs(rm))


def test_ricci_and_scalar_contractions():
    sc = build_scenario("perturbed_flat", {"wavenumber": 1}, torus(4, 10))
    g = sc.metric
    pack = curvature_pack(g, with_bach=False)
    ric = pack.ricci.full()
    assert np.array_equal(ric, np.swapaxes(ric, -1, -2))
    ref = oracles.contract_curvature(g.matrix, pack.riemann.full(), norms=False)
    assert np.max(np.abs(ric - ref["ricci"])) <= 1e-10
    assert np.max(np.abs(pack.scalar.values - ref["scalar"])) <= 1e-10


def test_connection_route_agrees_under_refinement():
    gaps = []
    for n in (12, 16):
        sc = build_scenario("perturbed_flat", {"wavenumber": 1, "amplitude": 0.02}, torus(4, n))
        g = sc.metric
        a = riemann(g).bivector()
        b = riemann_from_christoffel(g, christoffel(g)).bivector()
        gaps.append(np.max(np.abs(a - b)) / np.max(np.abs(a)))
    assert gaps[1] < gaps[0]
    assert gaps[1] <= 0.05


# --- Weyl -------------------------------------------------------------------


def test_weyl_equals_riemann_for_ricci_flat_input(rng):
    grid = torus(4, 8)
    g = MetricField.flat(grid)
    rm = TensorField.from_bivector(grid, rng.normal(size=grid.shape + (6, 6)))
    zero_ric = TensorField.zeros(grid, ("d", "d"), ((0, 1),))
    w, wp, wm = weyl_decompose(g, rm, zero_ric, ScalarField(grid, np.zeros(grid.shape)))
    assert np.array_equal(w.bivector(), rm.bivector())
    assert np.max(np.abs(wp.bivector() + wm.bivector() - w.bivector())) <= 1e-10


def test_weyl_split_needs_dimension_four():
    sc = build_scenario("sphere_stereo", {"dimension": 3}, ChartGrid.box(3, 12, -1.0, 1.0))
    pack = curvature_pack(sc.metric)
    assert pack.weyl is not None and pack.weyl_plus is None and pack.bach is None
    with pytest.raises(GridError):
        weyl_decompose(MetricField.flat(torus(2, 8)), None, None, None)


def test_four_sphere_weyl_and_bach_vanish():
    sc = build_scenario("sphere_stereo", {"dimension": 4}, ChartGrid.box(4, 16, -1.0, 1.0))
    pack = curvature_pack(sc.metric)
    rm_sup = tensor_sup(pack.riemann, sc.metric)
    assert tensor_sup(pack.weyl, sc.metric) <= 1e-3 * rm_sup
    assert tensor_sup(pack.bach, sc.metric) <= 1e-2 * rm_sup
    assert tensor_sup(pack.bach_self_dual, sc.metric) <= 1e-2 * rm_sup
    assert np.isfinite(elliptic_residual(sc.metric, pack).values).all()


@pytest.fixture(scope="module")
def s2xs2_pack():
    sc = build_scenario("s2xs2", grid=ChartGrid.box(4, 17, -1.0, 1.0))
    return sc, curvature_pack(sc.metric)


def test_product_weyl_norm_matches_symbolic(s2xs2_pack):
    sc, pack = s2xs2_pack
    core = _core(sc.grid)
    mesh = [m[core] for m in sc.grid.mesh(sparse=False)]
    sym = oracles.s2xs2()
    ref = oracles.contract_curvature(sym.metric_on(mesh), sym.riemann_on(mesh))
    w2 = pointwise_tensor_norm(pack.weyl, sc.metric).values[core] ** 2
    assert np.max(np.abs(w2 / ref["weyl_norm2"] - 1.0)) <= 0.02
    wp = pointwise_tensor_norm(pack.weyl_plus, sc.metric).values[core]
    assert np.min(wp) > 0.5
    split = pack.weyl_plus.bivector() + pack.weyl_minus.bivector() - pack.weyl.bivector()
    assert np.max(np.abs(split)) <= 1e-10


def test_weyl_trace_free(s2xs2_pack):
    sc, pack = s2xs2_pack
    core = _core(sc.grid)
    trace = np.einsum("...ik,...ijkl->...jl", sc.metric.inverse, pack.weyl.full())
    scale = np.max(np.abs(pack.riemann.full()[core]))
    assert np.max(np.abs(trace[core])) <= 1e-2 * scale


def test_weyl_conformal_invariance_under_refinement():
    gaps = []
    for n in (12, 16):
        grid = torus(4, n)
        g = build_scenario("perturbed_flat", {"wavenumber": 1, "amplitude": 0.05}, grid).metric
        x = grid.mesh(sparse=False)
        factor = np.exp(2 * 0.1 * np.sin(x[0] + x[2]) * np.cos(x[1]))
        gc = MetricField.from_matrix(grid, factor[..., None, None] * g.matrix)
        w = curvature_pack(g, with_bach=False).weyl.bivector()
        wc = curvature_pack(gc, with_bach=False).weyl.bivector()
        gaps.append(np.max(np.abs(wc / factor[..., None, None] - w)) / np.max(np.abs(w)))
    assert gaps[1] < gaps[0]


# --- Bach -------------------------------------------------------------------


@pytest.mark.parametrize("name, params", [
    ("flat", {}),
    ("sphere_stereo", {"dimension": 4}),
    ("s2xs2", {}),
    ("perturbed_flat", {}),
    ("conformal_torus", {"amplitude": 0.1}),
])
def test_bach_forms_agree(name, params):
    sc = build_scenario(name, params, default_grid(name, 4, 16))
    agree = bach_agreement(sc.metric, curvature_pack(sc.metric))
    assert agree["ratio"] <= 0.05


def test_product_bach_vanishes_under_refinement():
    sups, hs, scale = [], [], None
    for n in (13, 17):
        sc = build_scenario("s2xs2", grid=ChartGrid.box(4, n, -1.0, 1.0))
        pack = curvature_pack(sc.metric)
        core = _core(sc.grid)
        sups.append(tensor_sup(pack.bach, sc.metric, core))
        scale = tensor_sup(pack.riemann, sc.metric, core)
        hs.append(sc.grid.spacing[0])
    assert _fitted_order(sups, hs)[0] >= 2.0
    assert sups[-1] <= 0.05 * scale


def test_bach_rejects_non_four_dimensions():
    from locflow.curvature import bach

    g = MetricField.flat(torus(3, 8))
    with pytest.raises(GridError):
        bach(g, curvature_pack(g))


# --- refinement properties --------------------------------------------------


def test_contracted_bianchi_converges():
    defects, hs = [], []
    for n in (12, 24):
        grid = torus(3, n)
        g = build_scenario("perturbed_flat", {"wavenumber": 1, "amplitude": 0.1}, grid).metric
        defects.append(np.max(np.abs(contracted_bianchi_defect(g, curvature_pack(g)))))
        hs.append(grid.spacing[0])
    assert _fitted_order(defects, hs)[0] >= 1.0


def test_elliptic_residual_finite_on_random_perturbation():
    residuals = []
    for n in (12, 16):
        grid = torus(4, n)
        g = build_scenario("perturbed_flat", {"wavenumber": 1, "amplitude": 0.05}, grid).metric
        residuals.append(float(np.max(elliptic_residual(g, curvature_pack(g)).values)))
    assert all(np.isfinite(residuals))
    assert residuals[1] <= residuals[0] * 1.05


def _pullback(grid, g, disp, jac):
    # g(x) = J^T g(x + D(x)) J by periodic cubic interpolation
    coords = [(grid.mesh(sparse=False)[a] + disp[a]) / grid.spacing[a] for a in range(grid.dimension)]
    vals = np.empty_like(g.matrix)
    for i, j in itertools.product(range(grid.dimension), repeat=2):
        vals[..., i, j] = map_coordinates(g.matrix[..., i, j], coords, order=3, mode="grid-wrap")
    return MetricField.from_matrix(grid, np.einsum("...ai,...ab,...bj->...ij", jac, vals, jac)), coords


def test_scalar_curvature_is_diffeomorphism_invariant():
    errs = []
    for n in (32, 64):
        grid = torus(2, n)
        x, y = grid.mesh(sparse=False)
        g = MetricField.from_matrix(grid, np.stack([
            np.stack([1 + 0.2 * np.sin(y), 0.1 * np.cos(x)], -1),
            np.stack([0.1 * np.cos(x), 1 + 0.2 * np.sin(x + y)], -1)], -2))
        disp = np.stack([0.2 * np.sin(y), 0.15 * np.sin(x)])
        jac = np.zeros(grid.shape + (2, 2))
        jac[..., 0, 0] = jac[..., 1, 1] = 1.0
        jac[..., 0, 1] = 0.2 * np.cos(y)
        jac[..., 1, 0] = 0.15 * np.cos(x)
        gp, coords = _pullback(grid, g, disp, jac)
        s = scalar_curvature(g, ricci(g, riemann(g))).values
        sp_ = scalar_curvature(gp, ricci(gp, riemann(gp))).values
        moved = map_coordinates(s, coords, order=3, mode="grid-wrap")
        errs.append(np.max(np.abs(sp_ - moved)) / np.max(np.abs(s)))
    assert errs[1] < errs[0]
    assert errs[1] <= 0.01


def test_gradient_of_metric_shape():
    grid = torus(3, 8)
    g = MetricField.flat(grid)
    assert gradient_array(grid, g.components).shape == grid.shape + (3, 6)
