from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from locflow.curvature import christoffel, curvature_pack, riemann
from locflow.grid import ChartGrid, GridError
from locflow.scenarios import SCENARIOS, build_scenario, conformal_flow_oracle, default_grid

from conftest import torus


def _default(name: str):
    dim = 2 if name == "polar_flat" else 4
    return build_scenario(name, {}, default_grid(name, dim))


@pytest.mark.parametrize("name", SCENARIOS)
def test_scenario_passes_curvature_invariants(name):
    sc = _default(name)
    rm = riemann(sc.metric).full()
    scale = max(float(np.max(np.abs(rm))), 1.0)
    assert np.all(np.isfinite(rm))
    assert np.array_equal(rm, -np.swapaxes(rm, -4, -3))
    assert np.array_equal(rm, -np.swapaxes(rm, -2, -1))
    assert np.array_equal(rm, np.einsum("...ijkl->...klij", rm))
    bianchi = rm + np.einsum("...ijkl->...iklj", rm) + np.einsum("...ijkl->...iljk", rm)
    assert np.max(np.abs(bianchi)) <= 1e-12 * scale


@pytest.mark.parametrize("name", SCENARIOS)
def test_oracles_carry_provenance(name):
    sc = _default(name)
    assert sc.oracle
    for ov in sc.oracle.values():
        assert ov.basis in ("definition", "closed-form")
        assert ov.description


def test_flat_oracle_and_curvature_vanish():
    sc = build_scenario("flat", {}, torus(3, 12))
    assert sc.oracle["riemann"].value == 0.0
    assert np.max(np.abs(riemann(sc.metric).components)) == 0.0


def test_sphere_oracle_is_einstein_with_constant_three():
    sc = build_scenario("sphere_stereo", {"n": 4, "radius": 1.0}, ChartGrid.box(4, 12, -1.0, 1.0))
    assert sc.oracle["einstein"].value == 3.0
    assert sc.oracle["scalar"].value == 12.0
    assert sc.oracle["bach"].value == 0.0
    two = build_scenario("sphere_stereo", {"radius": 2.0}, ChartGrid.box(2, 12, -1.0, 1.0))
    assert two.oracle["scalar"].value == pytest.approx(0.5)
    assert "bach" not in two.oracle


def test_polar_christoffel_oracle_matches_engine():
    sc = build_scenario("polar_flat", {}, ChartGrid.box(2, 65, (1.0, 0.0), (2.0, 1.0)))
    gam = christoffel(sc.metric).full()
    r = sc.oracle["christoffel_r_thth"].value
    assert np.max(np.abs(gam[..., 0, 1, 1] - r)) <= 1e-6
    assert np.max(np.abs(gam[..., 1, 0, 1] - sc.oracle["christoffel_th_rth"].value)) <= 1e-6


def test_s2xs2_oracle_values_are_consistent():
    o = build_scenario("s2xs2", {}, ChartGrid.box(4, 12, -1.0, 1.0)).oracle
    rm2, ric2, scalar = o["riemann_norm2"].value, 4.0, o["scalar"].value
    # |W|^2 = |Rm|^2 - 2|Ric|^2 + R^2/3 in dimension four, with Ric = g
    assert o["weyl_norm2"].value == pytest.approx(rm2 - 2.0 * ric2 + scalar ** 2 / 3.0)
    assert o["weyl_pm_norm2"].value == pytest.approx(o["weyl_norm2"].value / 2.0)


def test_s2xs2_scalar_curvature_near_oracle():
    sc = build_scenario("s2xs2", {}, ChartGrid.box(4, 17, -1.0, 1.0))
    pack = curvature_pack(sc.metric)
    core = sc.grid.interior_mask()
    assert np.max(np.abs(pack.scalar.values[core] - 4.0)) <= 0.05


def test_conformal_torus_oracles_by_dimension():
    two = build_scenario("conformal_torus", {"amplitude": 0.3}, torus(2, 16))
    assert callable(two.oracle["scalar_flow"].value)
    x = two.grid.mesh(sparse=True)
    assert np.allclose(two.oracle["u0"].value, 0.3 * np.sin(x[0]) * np.sin(x[1]))
    assert np.allclose(two.metric.matrix[..., 0, 0], np.exp(2.0 * two.oracle["u0"].value))
    three = build_scenario("conformal_torus", {}, torus(3, 12))
    assert three.oracle["weyl"].value == 0.0


def test_perturbed_flat_is_deterministic():
    grid = torus(4, 12)
    a = build_scenario("perturbed_flat", {"amplitude": 0.05, "wavenumber": 2, "seed": 7}, grid)
    b = build_scenario("perturbed_flat", {"amplitude": 0.05, "wavenumber": 2, "seed": 7}, grid)
    assert a.metric.components.tobytes() == b.metric.components.tobytes()
    c = build_scenario("perturbed_flat", {"amplitude": 0.05, "wavenumber": 2, "seed": 8}, grid)
    assert not np.array_equal(a.metric.components, c.metric.components)


@given(st.integers(0, 10_000), st.integers(1, 2))
def test_perturbed_flat_is_band_limited(seed, k):
    grid = torus(2, 16)
    sc = build_scenario("perturbed_flat", {"amplitude": 0.2, "wavenumber": k, "seed": seed}, grid)
    spectrum = np.abs(np.fft.fftn(sc.metric.components[..., 1]))
    freq = np.abs(np.fft.fftfreq(16, 1.0 / 16))
    outside = (freq[:, None] > k) | (freq[None, :] > k)
    assert np.max(spectrum[outside]) <= 1e-10 * max(float(np.max(spectrum)), 1.0)
    assert sc.metric.min_eigenvalue > 0.5


@pytest.mark.parametrize("name, params, grid", [
    ("klein_bottle", {}, None),
    ("perturbed_flat", {"amplitude": 0.2}, ChartGrid((12,) * 4, (0.5,) * 4)),
    ("perturbed_flat", {"wavenumber": 4}, ChartGrid((12,) * 4, (0.5,) * 4)),
    ("perturbed_flat", {"modes": 0}, ChartGrid((12,) * 4, (0.5,) * 4)),
    ("perturbed_flat", {}, ChartGrid.box(4, 12, -1.0, 1.0)),
    ("conformal_torus", {"amplitude": 2.5}, ChartGrid((12, 12), (0.5, 0.5))),
    ("sphere_stereo", {"radius": -1.0}, ChartGrid.box(3, 12, -1.0, 1.0)),
    ("sphere_stereo", {}, ChartGrid((12, 12), (0.5, 0.5))),
    ("s2xs2", {}, ChartGrid.box(3, 12, -1.0, 1.0)),
    ("polar_flat", {}, ChartGrid.box(2, 12, (-1.0, 0.0), (1.0, 1.0))),
])
def test_invalid_scenarios_rejected(name, params, grid):
    with pytest.raises(GridError):
        build_scenario(name, params, grid)


def test_default_grids():
    assert default_grid("flat", 3, 8).shape == (8, 8, 8)
    assert default_grid("flat", 3, 8).periodic
    assert not default_grid("sphere_stereo", 4, 8).periodic
    assert default_grid("polar_flat", 2, 8).origin == (1.0, 0.0)
    assert build_scenario("conformal_torus").dimension == 2
    with pytest.raises(GridError):
        default_grid("nowhere")


def test_conformal_oracle_limits():
    n = 32
    x = np.arange(n) * 2.0 * math.pi / n
    u0 = 1e-4 * np.sin(x)[:, None] * np.ones(n)[None, :]
    assert np.array_equal(conformal_flow_oracle(u0, 0.0), u0)
    # small data: linear heat flow, sin x decays like e^{-t} up to O(amplitude^2)
    out = conformal_flow_oracle(u0, 0.3)
    assert np.max(np.abs(out - math.exp(-0.3) * u0)) <= 1e-7
    # a constant conformal factor is stationary
    assert np.allclose(conformal_flow_oracle(np.full((n, n), 0.4), 0.3), 0.4, atol=1e-13)
    # diffusivity rescales time
    assert np.allclose(conformal_flow_oracle(u0, 0.3, 2.0), conformal_flow_oracle(u0, 0.6), atol=1e-12)
