"""Closed-form and randomized test metrics with attached reference values."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .grid import ChartGrid, GridError, MetricField

SCENARIOS = ("flat", "polar_flat", "conformal_torus", "sphere_stereo", "s2xs2", "perturbed_flat")


@dataclass(frozen=True)
class OracleValue:
    """A reference value and how it is known (``definition`` or ``closed-form``)."""

    value: object
    basis: str
    description: str


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    params: dict
    metric: MetricField
    oracle: dict = field(default_factory=dict)

    @property
    def dimension(self) -> int:
        return self.metric.dimension

    @property
    def grid(self) -> ChartGrid:
        return self.metric.grid


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise GridError(message)


def default_grid(name: str, dimension: int = 4, n: int = 16) -> ChartGrid:
    if name == "polar_flat":
        return ChartGrid.box(2, n, (1.0, 0.0), (2.0, 1.0))
    if name in ("flat", "conformal_torus", "perturbed_flat"):
        return ChartGrid(extents=(n,) * dimension, spacing=(2.0 * math.pi / n,) * dimension)
    if name == "sphere_stereo":
        return ChartGrid.box(dimension, n, -1.0, 1.0)
    if name == "s2xs2":
        return ChartGrid.box(4, n, -1.0, 1.0)
    raise GridError(f"unknown scenario {name!r}; choose from {SCENARIOS}")


def conformal_flow_oracle(u0: np.ndarray, t: float, diffusivity: float = 1.0) -> np.ndarray:
    """Reference solution of ``du/dt = k e^(-2u) Lap u`` on the periodic
    ``[0, 2pi)^2`` torus by Fourier differentiation and an adaptive
    8th-order Runge-Kutta integrator at tight tolerance."""
    n0, n1 = u0.shape
    k0 = np.fft.fftfreq(n0, 1.0 / n0)
    k1 = np.fft.fftfreq(n1, 1.0 / n1)
    symbol = -(k0[:, None] ** 2 + k1[None, :] ** 2)

    def rhs(_, y):
        u = y.reshape(n0, n1)
        lap = np.real(np.fft.ifft2(symbol * np.fft.fft2(u)))
        return (diffusivity * np.exp(-2.0 * u) * lap).ravel()

    if t == 0:
        return np.array(u0, dtype=float)
    sol = solve_ivp(rhs, (0.0, t), np.asarray(u0, dtype=float).ravel(), method="DOP853",
                    rtol=1e-12, atol=1e-14)
    if not sol.success:
        raise RuntimeError(sol.message)
    return sol.y[:, -1].reshape(n0, n1)


def _trig_field(rng, grid: ChartGrid, wavenumber: int, modes: int) -> np.ndarray:
    x = grid.mesh(sparse=True)
    out = np.zeros(grid.shape)
    total = 0.0
    for _ in range(modes):
        k = rng.integers(-wavenumber, wavenumber + 1, size=grid.dimension)
        if not np.any(k):
            k[0] = wavenumber
        c = rng.uniform(-1.0, 1.0)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        arg = sum(float(k[a]) * x[a] for a in range(grid.dimension)) + phase
        out = out + c * np.cos(arg)
        total += abs(c)
    return out / total


def build_scenario(name: str, params: dict | None = None, grid: ChartGrid | None = None) -> Scenario:
    """Metric and reference values for a named scenario.

    Parameters (defaults in brackets): ``sphere_stereo``: ``n`` [grid
    dimension], ``radius`` [1]; ``conformal_torus``: ``amplitude`` [0.2];
    ``perturbed_flat``: ``amplitude`` [0.05], ``wavenumber`` [2], ``seed``
    [7], ``modes`` [6].  The result is a pure function of (name, params,
    grid).
    """
    params = dict(params or {})
    if name not in SCENARIOS:
        raise GridError(f"unknown scenario {name!r}; choose from {SCENARIOS}")
    dim = int(params.get("dimension", params.get("n", grid.dimension if grid else 4)))
    if grid is None:
        grid = default_grid(name, 2 if name in ("polar_flat", "conformal_torus") else dim)
    n = grid.dimension
    x = grid.mesh(sparse=True)
    oracle = {}

    if name == "flat":
        metric = MetricField.flat(grid)
        oracle["riemann"] = OracleValue(0.0, "definition", "flat metric has vanishing curvature")
        oracle["scalar"] = OracleValue(0.0, "definition", "flat metric has vanishing curvature")

    elif name == "polar_flat":
        _require(n == 2 and not grid.periodic, "polar_flat needs a frozen 2D grid")
        r = x[0] + 0.0 * x[1]
        _require(bool(np.all(r > 0)), "polar_flat needs r > 0 on the grid")
        mat = np.zeros(grid.shape + (2, 2))
        mat[..., 0, 0] = 1.0
        mat[..., 1, 1] = r ** 2
        metric = MetricField.from_matrix(grid, mat)
        oracle["christoffel_r_thth"] = OracleValue(-r, "closed-form", "Gamma^r_thth = -r for diag(1, r^2)")
        oracle["christoffel_th_rth"] = OracleValue(1.0 / r, "closed-form", "Gamma^th_rth = 1/r for diag(1, r^2)")
        oracle["scalar"] = OracleValue(0.0, "closed-form", "polar coordinates on the flat plane")

    elif name == "conformal_torus":
        _require(grid.periodic, "conformal_torus needs a periodic grid")
        amp = float(params.get("amplitude", 0.2))
        _require(abs(amp) < 2.0, "conformal_torus amplitude must be below 2")
        u0 = amp * np.sin(x[0]) * np.sin(x[1])
        metric = MetricField.conformal(grid, np.exp(2.0 * u0))
        oracle["u0"] = OracleValue(u0, "definition", "log-conformal factor g = e^(2u) delta")
        if n == 2:
            oracle["scalar_flow"] = OracleValue(conformal_flow_oracle, "closed-form",
                                                "Ricci flow of e^(2u) delta reduces to du/dt = e^(-2u) Lap u")
        else:
            oracle["weyl"] = OracleValue(0.0, "closed-form", "conformally flat metric")

    elif name == "sphere_stereo":
        _require(not grid.periodic, "sphere_stereo needs a frozen grid")
        radius = float(params.get("radius", 1.0))
        _require(radius > 0, "sphere_stereo radius must be positive")
        r2 = sum(xi * xi for xi in x) / radius ** 2
        metric = MetricField.conformal(grid, 4.0 * radius ** 2 / (1.0 + r2) ** 2)
        oracle["einstein"] = OracleValue((n - 1) / radius ** 2, "closed-form", "Ric = (n-1)/radius^2 g")
        oracle["scalar"] = OracleValue(n * (n - 1) / radius ** 2, "closed-form", "R = n(n-1)/radius^2")
        oracle["weyl"] = OracleValue(0.0, "closed-form", "round sphere is conformally flat")
        if n == 4:
            oracle["bach"] = OracleValue(0.0, "closed-form", "Bach vanishes on conformally flat metrics")

    elif name == "s2xs2":
        _require(n == 4 and not grid.periodic, "s2xs2 needs a frozen 4D grid")
        f1 = 4.0 / (1.0 + x[0] ** 2 + x[1] ** 2) ** 2 + 0.0 * (x[2] + x[3])
        f2 = 4.0 / (1.0 + x[2] ** 2 + x[3] ** 2) ** 2 + 0.0 * (x[0] + x[1])
        mat = np.zeros(grid.shape + (4, 4))
        mat[..., 0, 0] = mat[..., 1, 1] = f1
        mat[..., 2, 2] = mat[..., 3, 3] = f2
        metric = MetricField.from_matrix(grid, mat)
        oracle["einstein"] = OracleValue(1.0, "closed-form", "product of unit spheres: Ric = g")
        oracle["scalar"] = OracleValue(4.0, "closed-form", "R = 2 + 2")
        oracle["riemann_norm2"] = OracleValue(8.0, "closed-form", "|Rm|^2 = 4 K^2 per factor")
        oracle["weyl_norm2"] = OracleValue(16.0 / 3.0, "closed-form", "|W|^2 = |Rm|^2 - 2|Ric|^2 + R^2/3")
        oracle["weyl_pm_norm2"] = OracleValue(8.0 / 3.0, "closed-form", "|W+|^2 = |W-|^2 by orientation reversal")
        oracle["bach"] = OracleValue(0.0, "closed-form", "Bach vanishes on Einstein 4-metrics")

    else:  # perturbed_flat
        _require(grid.periodic, "perturbed_flat needs a periodic grid")
        amp = float(params.get("amplitude", 0.05))
        k = int(params.get("wavenumber", 2))
        seed = int(params.get("seed", 7))
        modes = int(params.get("modes", 6))
        _require(0.0 <= amp <= 0.5 / n, f"perturbed_flat amplitude must lie in [0, {0.5 / n:g}]")
        _require(1 <= k <= min(grid.extents) // 4, "perturbed_flat wavenumber out of range")
        _require(modes >= 1, "perturbed_flat needs at least one mode")
        rng = np.random.default_rng(seed)
        mat = np.zeros(grid.shape + (n, n))
        for i in range(n):
            mat[..., i, i] = 1.0
            for j in range(i + 1):
                h = amp * _trig_field(rng, grid, k, modes)
                mat[..., i, j] += h
                if i != j:
                    mat[..., j, i] += h
        metric = MetricField.from_matrix(grid, mat)
        oracle["band_limit"] = OracleValue(k, "definition", "Fourier modes with |k_a| <= wavenumber")

    return Scenario(name, params, metric, oracle)
