from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad

from locflow.grid import (
    ChartGrid,
    GridError,
    MetricField,
    ScalarField,
    TensorField,
    bivector_from_full,
    bivector_to_full,
    grid_diff,
    gradient_norm_squared,
    integrate,
    integrate_array,
    laplace_beltrami,
    lp_norm,
    partial_derivative,
    pointwise_tensor_norm,
    sym_pack,
    sym_unpack,
)

from conftest import torus


# --- ChartGrid invariants ---------------------------------------------------


@pytest.mark.parametrize("extents, spacing, boundary", [
    ((16,), (0.1,), "periodic"),
    ((8,) * 5, (0.1,) * 5, "periodic"),
    ((8, 7), (0.1, 0.1), "periodic"),
    ((8, 8), (0.1, 0.0), "periodic"),
    ((8, 8), (0.1, -1.0), "frozen"),
    ((8, 8), (0.1, 0.1), "reflecting"),
])
def test_grid_rejects_invalid(extents, spacing, boundary):
    with pytest.raises(GridError):
        ChartGrid(extents, spacing, boundary)


def test_grid_memory_budget():
    with pytest.raises(GridError, match="memory budget"):
        ChartGrid((64,) * 4, (0.1,) * 4, max_points=64 ** 4 - 1)
    assert ChartGrid((64,) * 4, (0.1,) * 4, max_points=64 ** 4).npoints == 64 ** 4


def test_box_spacing():
    assert ChartGrid.box(2, 11, 0.0, 1.0).spacing == (0.1, 0.1)
    assert ChartGrid.box(2, 10, 0.0, 1.0, boundary="periodic").spacing == (0.1, 0.1)


# --- finite differences -----------------------------------------------------


@pytest.mark.parametrize("order", [1, 2])
@pytest.mark.parametrize("boundary", ["periodic", "frozen"])
def test_derivative_of_constant_vanishes(order, boundary):
    grid = ChartGrid((12, 9), (0.3, 0.2), boundary)
    f = ScalarField(grid, np.full(grid.shape, 3.7))
    for axis in range(2):
        assert np.max(np.abs(partial_derivative(f, axis, order).values)) < 1e-12


def _stencil_gain(h):
    # the 4th-order central first difference maps sin to cos times this factor
    return (8.0 * math.sin(h) - math.sin(2.0 * h)) / (6.0 * h)


@pytest.mark.parametrize("n", [64, 128])
def test_sin_derivative_matches_stencil_oracle(n):
    grid = ChartGrid((n, 8), (2 * math.pi / n, 1.0))
    x = grid.mesh()[0] + np.zeros(grid.shape)
    d = grid_diff(grid, np.sin(x), 0)
    h = grid.spacing[0]
    err = np.max(np.abs(d - np.cos(x)))
    expected = abs(1.0 - _stencil_gain(h)) * np.max(np.abs(np.cos(x)))
    assert err == pytest.approx(expected, rel=1e-6, abs=1e-14)
    assert err <= h ** 4 / 30.0
    if n == 128:
        assert err <= 1e-6


def test_stencil_convergence_order():
    errs = []
    ns = [16, 32, 64]
    for n in ns:
        grid = ChartGrid((n, 8), (2 * math.pi / n, 1.0))
        x = grid.mesh()[0] + np.zeros(grid.shape)
        errs.append(np.max(np.abs(grid_diff(grid, np.sin(x), 0) - np.cos(x))))
    orders = [math.log2(errs[i] / errs[i + 1]) for i in range(len(ns) - 1)]
    assert min(orders) >= 3.5


def test_quadratic_second_derivative_exact_on_frozen_grid():
    grid = ChartGrid.box(2, 12, -1.0, 1.5)
    x = grid.mesh()[0] + np.zeros(grid.shape)
    d2 = grid_diff(grid, x ** 2, 0, order=2)
    assert np.max(np.abs(d2 - 2.0)) <= 1e-8


def test_derivative_axis_out_of_range():
    grid = torus(2, 8)
    with pytest.raises(GridError):
        partial_derivative(ScalarField(grid, np.zeros(grid.shape)), 2)


def test_non_finite_field_rejected():
    grid = torus(2, 8)
    vals = np.zeros(grid.shape)
    vals[0, 0] = np.nan
    with pytest.raises(GridError):
        ScalarField(grid, vals)


# --- quadrature and norms ---------------------------------------------------


def test_unit_torus_volume():
    grid = ChartGrid((8,) * 4, (1 / 8,) * 4)
    assert integrate(ScalarField(grid, np.ones(grid.shape)), MetricField.flat(grid)) == pytest.approx(1.0, abs=1e-12)


def _one_axis_grid(n=64):
    # second axis has unit length, so 2D integrals reduce to the 1D value
    return ChartGrid((n, 8), (2 * math.pi / n, 1 / 8))


def test_sin_squared_integral():
    grid = _one_axis_grid()
    x = grid.mesh()[0] + np.zeros(grid.shape)
    assert integrate(ScalarField(grid, np.sin(x) ** 2)) == pytest.approx(math.pi, abs=1e-8)


def test_conformal_volume_matches_scalar_quadrature():
    grid = torus(2, 64)
    x = grid.mesh()[0] + np.zeros(grid.shape)
    g = MetricField.conformal(grid, np.exp(2 * 0.1 * np.sin(x)))
    ref = 2 * math.pi * quad(lambda s: math.exp(0.2 * math.sin(s)), 0, 2 * math.pi, epsabs=1e-13)[0]
    assert integrate(ScalarField(grid, np.ones(grid.shape)), g) == pytest.approx(ref, abs=1e-6)


def test_frozen_trapezoid_weights():
    grid = ChartGrid.box(2, 11, 0.0, 1.0)
    x = grid.mesh()[0] + np.zeros(grid.shape)
    assert integrate_array(grid, x) == pytest.approx(0.5, abs=1e-12)


@pytest.mark.parametrize("p", [1, 2, 3.5, 4, math.inf])
def test_lp_norm_of_constant(p):
    grid = ChartGrid((8, 8), (1 / 8, 1 / 8))
    assert lp_norm(ScalarField(grid, np.full(grid.shape, 2.0)), p) == pytest.approx(2.0, abs=1e-12)


def test_l2_norm_of_sin():
    grid = _one_axis_grid()
    x = grid.mesh()[0] + np.zeros(grid.shape)
    assert lp_norm(ScalarField(grid, np.sin(x)), 2) == pytest.approx(math.sqrt(math.pi), abs=1e-8)


def test_l4_norm_identity(rng):
    grid = torus(2, 16)
    f = ScalarField(grid, rng.normal(size=grid.shape))
    assert lp_norm(f, 4) == pytest.approx(lp_norm(ScalarField(grid, f.values ** 2), 2) ** 0.5, rel=1e-12)


def test_lp_norm_rejects_small_p():
    grid = torus(2, 8)
    with pytest.raises(ValueError):
        lp_norm(ScalarField(grid, np.ones(grid.shape)), 0.5)


def test_non_positive_determinant_rejected():
    grid = torus(2, 8)
    mat = np.broadcast_to(np.diag([1.0, -1.0]), grid.shape + (2, 2))
    with pytest.raises(GridError):
        MetricField.from_matrix(grid, mat)


_coef = st.floats(-5, 5, allow_nan=False)


@given(_coef, _coef, st.integers(0, 2 ** 31))
def test_integrate_is_linear(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    grid = torus(2, 8)
    g = MetricField.conformal(grid, 1.0 + 0.5 * rng.random(grid.shape))
    f, h = rng.normal(size=grid.shape), rng.normal(size=grid.shape)
    lhs = integrate_array(grid, alpha * f + beta * h, g)
    rhs = alpha * integrate_array(grid, f, g) + beta * integrate_array(grid, h, g)
    assert lhs == pytest.approx(rhs, abs=1e-12 * (1 + abs(alpha) + abs(beta)) * 100)


@given(st.integers(0, 2 ** 31), st.floats(0.1, 10), st.sampled_from([1.0, 2.0, 3.0, 4.0]))
def test_lp_norm_monotone_and_homogeneous(seed, lam, p):
    rng = np.random.default_rng(seed)
    grid = torus(2, 8)
    f = rng.normal(size=grid.shape)
    bigger = np.abs(f) + rng.random(grid.shape)
    norm = lambda v: lp_norm(ScalarField(grid, v), p)
    assert norm(f) <= norm(bigger) * (1 + 1e-12)
    assert norm(lam * f) == pytest.approx(lam * norm(f), rel=1e-12)


def test_discrete_integration_by_parts_is_second_order():
    defects = []
    for n in (16, 32, 64):
        grid = torus(2, n)
        x, y = grid.mesh()
        f = np.sin(x) * np.cos(2 * y) + 0.3 * np.cos(x + y)
        psi = np.cos(3 * x) + np.sin(x - y)
        dot = sum(grid_diff(grid, f, k) * grid_diff(grid, psi, k) for k in range(2))
        defects.append(abs(integrate_array(grid, dot) + integrate_array(grid, psi * laplace_beltrami(grid, f))))
    hs = [2 * math.pi / n for n in (16, 32, 64)]
    consts = [d / h ** 2 for d, h in zip(defects, hs)]
    assert max(consts) <= 10.0


# --- tensors ----------------------------------------------------------------


def test_symmetric_storage_is_exact(rng):
    grid = torus(3, 8)
    a = rng.normal(size=grid.shape + (3, 3))
    t = TensorField.from_full(grid, a, ("d", "d"), ((0, 1),))
    full = t.full()
    assert np.array_equal(full, np.swapaxes(full, -1, -2))
    assert np.allclose(full, 0.5 * (a + np.swapaxes(a, -1, -2)), atol=1e-15)


def test_riemann_storage_symmetries_exact(rng):
    grid = torus(4, 8)
    m = rng.normal(size=grid.shape + (6, 6))
    t = TensorField.from_bivector(grid, m)
    r = t.full()
    assert np.array_equal(r, -np.swapaxes(r, -4, -3))
    assert np.array_equal(r, -np.swapaxes(r, -2, -1))
    assert np.array_equal(r, np.moveaxis(r, (-4, -3), (-2, -1)))
    assert np.allclose(bivector_from_full(bivector_to_full(t.bivector())), t.bivector())


def test_packing_round_trip(rng):
    a = rng.normal(size=(5, 4, 4))
    a = a + np.swapaxes(a, -1, -2)
    assert np.array_equal(sym_unpack(sym_pack(a), 4), a)


def test_inverse_metric_accuracy(rng):
    grid = torus(4, 8)
    b = rng.normal(size=grid.shape + (4, 4)) * 0.2
    g = MetricField.from_matrix(grid, np.eye(4) + b @ np.swapaxes(b, -1, -2))
    err = np.abs(g.matrix @ g.inverse - np.eye(4)).max()
    assert err <= 1e-10


def test_zero_tensor_norm():
    grid = torus(3, 8)
    t = TensorField.zeros(grid, ("d", "d", "u"), ((0, 1),))
    assert pointwise_tensor_norm(t, MetricField.flat(grid)).max() == 0.0


def test_identity_endomorphism_norm():
    grid = torus(4, 8)
    ident = np.broadcast_to(np.eye(4), grid.shape + (4, 4))
    t = TensorField.from_full(grid, ident, ("u", "d"))
    x = grid.mesh()[0] + np.zeros(grid.shape)
    g = MetricField.conformal(grid, 1.5 + 0.5 * np.sin(x))
    assert np.allclose(pointwise_tensor_norm(t, g).values, 2.0, atol=1e-12)


def test_norm_rejects_mixed_riemann_valence(rng):
    grid = torus(4, 8)
    t = TensorField.from_bivector(grid, rng.normal(size=grid.shape + (6, 6)), ("u", "d", "d", "d"))
    with pytest.raises(GridError):
        pointwise_tensor_norm(t, MetricField.flat(grid))


def test_gradient_norm_uses_inverse_metric():
    grid = torus(2, 32)
    x = grid.mesh()[0] + np.zeros(grid.shape)
    g = MetricField.conformal(grid, np.full(grid.shape, 4.0))
    assert np.allclose(gradient_norm_squared(grid, x * 0 + np.sin(x), g),
                       0.25 * gradient_norm_squared(grid, np.sin(x)), atol=1e-14)
