"""Cutoff functions, Sobolev-constant estimation, weighted space-time
functionals and the Moser exponent schedule."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .grid import (
    COLLAR,
    ChartGrid,
    GridError,
    MetricField,
    ScalarField,
    gradient_norm_squared,
    integrate_array,
    laplace_beltrami,
)

logger = logging.getLogger(__name__)

PROFILES = ("cos2", "quintic")
# sup |profile'(s)| on the unit ramp; |grad phi| <= PROFILE_SLOPE / (r/2)
PROFILE_SLOPE = {"cos2": math.pi / 2.0, "quintic": 15.0 / 8.0}
MIN_CELLS_PER_RADIUS = 8


def _ramp(s: np.ndarray, profile: str) -> np.ndarray:
    """Monotone ramp from 1 (s <= 0) to 0 (s >= 1)."""
    s = np.clip(s, 0.0, 1.0)
    if profile == "cos2":
        out = np.cos(0.5 * math.pi * s) ** 2
    elif profile == "quintic":
        out = 1.0 - s ** 3 * (10.0 - 15.0 * s + 6.0 * s * s)
    else:
        raise ValueError(f"unknown cutoff profile {profile!r}; choose from {PROFILES}")
    # exact endpoints: cos(pi/2)^2 is 4e-33, not 0, which would leak the support
    return np.where(s >= 1.0, 0.0, out)


def coordinate_distance(grid: ChartGrid, center) -> np.ndarray:
    """Euclidean coordinate distance to ``center`` (minimum image on periodic grids)."""
    center = np.asarray(center, dtype=float)
    if center.shape != (grid.dimension,):
        raise GridError(f"center must have {grid.dimension} coordinates")
    sq = np.zeros(grid.shape)
    for axis, x in enumerate(grid.mesh(sparse=True)):
        d = x - center[axis]
        if grid.periodic:
            length = grid.lengths[axis]
            d = (d + 0.5 * length) % length - 0.5 * length
        sq = sq + d * d
    return np.sqrt(sq)


def check_ball_fits(grid: ChartGrid, center, r: float) -> None:
    """Raise unless the coordinate ball B(center, r) is resolved and inside the grid."""
    hmax = max(grid.spacing)
    if r < MIN_CELLS_PER_RADIUS * hmax * (1.0 - 1e-9):
        raise GridError(f"radius {r:g} is below {MIN_CELLS_PER_RADIUS} grid spacings ({hmax:g})")
    center = np.asarray(center, dtype=float)
    for axis in range(grid.dimension):
        lo = grid.origin[axis]
        length = grid.lengths[axis]
        if grid.periodic:
            if 2.0 * r >= length:
                raise GridError(f"ball of radius {r:g} wraps around periodic axis {axis}")
            continue
        margin = COLLAR * grid.spacing[axis]
        hi = lo + length
        if center[axis] - r < lo + margin or center[axis] + r > hi - margin:
            raise GridError(f"ball of radius {r:g} does not fit inside axis {axis} with the collar margin")


@dataclass(frozen=True, eq=False)
class CutoffFunction:
    """Radial cutoff: 1 on ``B(center, r/2)``, 0 outside ``B(center, r)``.

    ``grad_norm`` and ``laplacian`` are finite-difference values measured
    with ``metric`` (flat coordinates when no metric was supplied).
    """

    phi: ScalarField
    grad_norm: ScalarField
    laplacian: ScalarField
    sup_grad: float
    support_radius: float
    center: tuple
    profile: str = "cos2"
    metric: MetricField | None = None

    @property
    def grid(self) -> ChartGrid:
        return self.phi.grid

    @property
    def support(self) -> np.ndarray:
        return self.phi.values > 0.0

    @property
    def sup_laplacian(self) -> float:
        return float(np.max(np.abs(self.laplacian.values)))

    def __call__(self, point) -> float:
        """Exact profile value at an arbitrary chart point."""
        point = np.asarray(point, dtype=float)
        d = point - np.asarray(self.center)
        if self.grid.periodic:
            lengths = np.asarray(self.grid.lengths)
            d = (d + 0.5 * lengths) % lengths - 0.5 * lengths
        s = (float(np.linalg.norm(d)) - 0.5 * self.support_radius) / (0.5 * self.support_radius)
        return float(_ramp(np.asarray(s), self.profile))


def cutoff_from_values(phi: np.ndarray, grid: ChartGrid, metric: MetricField | None = None,
                       center=None, radius: float = math.inf, profile: str = "custom") -> CutoffFunction:
    """Wrap an arbitrary ``[0, 1]`` field (e.g. ``phi = 1``) as a cutoff."""
    phi = np.asarray(phi, dtype=float)
    if phi.shape != grid.shape:
        phi = np.broadcast_to(phi, grid.shape).copy()
    if np.any(phi < 0.0) or np.any(phi > 1.0):
        raise GridError("cutoff values must lie in [0, 1]")
    grad = np.sqrt(gradient_norm_squared(grid, phi, metric))
    lap = laplace_beltrami(grid, phi, metric)
    center = tuple(grid.origin) if center is None else tuple(float(c) for c in center)
    return CutoffFunction(ScalarField(grid, phi), ScalarField(grid, grad), ScalarField(grid, lap),
                          float(np.max(grad)), float(radius), center, profile, metric)


def make_cutoff(grid: ChartGrid, center, r: float, profile: str = "cos2",
                metric: MetricField | None = None) -> CutoffFunction:
    """Radial cutoff of coordinate radius ``r`` around ``center``.

    Distances are measured in the chart's background coordinates; the
    profile ramps over ``r/2 <= |x - center| <= r``.  ``cos2`` has sup slope
    ``pi/r`` and is C^1; ``quintic`` (smoothstep) has sup slope ``3.75/r``
    and is C^2.
    """
    if profile not in PROFILES:
        raise ValueError(f"unknown cutoff profile {profile!r}; choose from {PROFILES}")
    check_ball_fits(grid, center, r)
    dist = coordinate_distance(grid, center)
    phi = _ramp((dist - 0.5 * r) / (0.5 * r), profile)
    return cutoff_from_values(phi, grid, metric, center, r, profile)


# --------------------------------------------------------------------------
# Sobolev constant
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SobolevEstimate:
    """Largest ratio ``||f||_4^2 / ||grad f||_2^2`` found over a candidate family.

    ``constant`` is a lower bound for the true constant; ``usable`` applies
    the safety factor for consumers of the inequality.
    """

    constant: float
    witness: ScalarField
    sample_count: int
    safety_factor: float = 2.0
    ratios: tuple = field(default=(), repr=False)

    @property
    def usable(self) -> float:
        return self.constant * self.safety_factor


def sobolev_ratio(f: np.ndarray, g: MetricField) -> float:
    """``(int f^4 dV)^(1/2) / int |grad f|^2 dV`` under ``g``."""
    grid = g.grid
    num = integrate_array(grid, f ** 4, g)
    den = integrate_array(grid, gradient_norm_squared(grid, f, g), g)
    if den <= 0.0:
        return 0.0
    return math.sqrt(max(num, 0.0)) / den


def _domain(g: MetricField, domain):
    grid = g.grid
    if isinstance(domain, CutoffFunction):
        return np.asarray(domain.center, dtype=float), domain.support_radius
    if domain is None:
        lengths = np.asarray(grid.lengths)
        center = np.asarray(grid.origin) + 0.5 * lengths
        if grid.periodic:
            radius = 0.45 * float(np.min(lengths))
        else:
            margin = COLLAR * np.asarray(grid.spacing)
            radius = float(np.min(0.5 * lengths - margin))
        return center, radius
    center, radius = domain
    return np.asarray(center, dtype=float), float(radius)


def _bump(dist: np.ndarray, width: float) -> np.ndarray:
    s2 = (dist / width) ** 2
    return np.where(s2 < 1.0, (1.0 - s2) ** 3, 0.0)


def _stiffness(g: MetricField, mask: np.ndarray):
    """Second-order Dirichlet stiffness matrix on ``mask`` (diagonal conductivity)."""
    grid = g.grid
    nodes = np.flatnonzero(mask.ravel())
    index = -np.ones(grid.npoints, dtype=np.int64)
    index[nodes] = np.arange(nodes.size)
    index = index.reshape(grid.shape)
    sqrt_det = g.sqrt_det
    inv = g.inverse
    rows, cols, vals = [], [], []
    diag = np.zeros(nodes.size)
    for k in range(grid.dimension):
        cond = sqrt_det * inv[..., k, k] / grid.spacing[k] ** 2
        nb_index = np.roll(index, -1, axis=k)
        face = 0.5 * (cond + np.roll(cond, -1, axis=k))
        if not grid.periodic:
            last = [slice(None)] * grid.dimension
            last[k] = -1
            nb_index[tuple(last)] = -1
        here = index.ravel()
        there = nb_index.ravel()
        c = face.ravel()
        # edges leaving the admissible set see a Dirichlet zero
        inside = here >= 0
        both = inside & (there >= 0)
        np.add.at(diag, here[inside], c[inside])
        np.add.at(diag, there[both], c[both])
        outside_from_there = (here < 0) & (there >= 0)
        np.add.at(diag, there[outside_from_there], c[outside_from_there])
        rows += [here[both], there[both]]
        cols += [there[both], here[both]]
        vals += [-c[both], -c[both]]
    rows.append(np.arange(nodes.size))
    cols.append(np.arange(nodes.size))
    vals.append(diag)
    mat = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(nodes.size, nodes.size))
    return mat, nodes


def _solve_spd(mat, rhs: np.ndarray, rtol: float = 1e-10, maxiter: int = 5000) -> np.ndarray:
    """Jacobi-preconditioned conjugate gradients with fixed-order reductions."""
    inv_diag = 1.0 / mat.diagonal()
    x = np.zeros_like(rhs)
    r = rhs.copy()
    z = inv_diag * r
    d = z.copy()
    rz = float(np.sum(r * z))
    stop = rtol * math.sqrt(float(np.sum(rhs * rhs)))
    for _ in range(maxiter):
        q = mat @ d
        alpha = rz / float(np.sum(d * q))
        x += alpha * d
        r -= alpha * q
        if math.sqrt(float(np.sum(r * r))) <= stop:
            break
        z = inv_diag * r
        rz_new = float(np.sum(r * z))
        d = z + (rz_new / rz) * d
        rz = rz_new
    return x


def estimate_sobolev(g: MetricField, domain=None, budget: int = 16, safety_factor: float = 2.0,
                     seed: int = 0, refinements: int = 3, start=None) -> SobolevEstimate:
    """Lower-bound the Sobolev constant of a coordinate ball by test functions.

    Candidates are radial bumps of varied widths and centers inside the
    domain ball, followed by ``refinements`` inverse-power steps
    ``-Lap w = f^3`` (Dirichlet outside the ball) started from the best
    bump, or from ``start`` when given.  The argmax tie-break is the lowest
    candidate index.
    """
    grid = g.grid
    center, radius = _domain(g, domain)
    dist = coordinate_distance(grid, center)
    mask = dist < radius
    if int(mask.sum()) < 8 ** 3:
        raise GridError("Sobolev domain has fewer than 8^3 interior nodes")
    rng = np.random.default_rng(seed)
    hmax = max(grid.spacing)
    wmin = min(radius, MIN_CELLS_PER_RADIUS * hmax)
    candidates = []
    if start is not None:
        candidates.append(np.where(mask, np.asarray(start, dtype=float), 0.0))
    nbumps = max(1, budget)
    widths = np.geomspace(radius, wmin, nbumps)
    for i, w in enumerate(widths):
        offset = np.zeros(grid.dimension)
        room = radius - w
        if i > 0 and room > 0:
            direction = rng.normal(size=grid.dimension)
            direction /= np.linalg.norm(direction)
            offset = direction * room * rng.uniform(0.0, 1.0)
        candidates.append(_bump(coordinate_distance(grid, center + offset), w))
    ratios = [sobolev_ratio(f, g) for f in candidates]
    best = int(np.argmax(ratios))
    f = candidates[best]
    if refinements > 0:
        mat, nodes = _stiffness(g, mask)
        weight = g.sqrt_det.ravel()[nodes]
        for _ in range(refinements):
            rhs = weight * f.ravel()[nodes] ** 3
            w = np.zeros(grid.npoints)
            w[nodes] = _solve_spd(mat, rhs)
            w = w.reshape(grid.shape)
            peak = float(np.max(np.abs(w)))
            if not np.isfinite(peak) or peak == 0.0:
                break
            f = w / peak
            candidates.append(f)
            ratios.append(sobolev_ratio(f, g))
        best = int(np.argmax(ratios))
    a = ratios[best]
    assert all(r <= a for r in ratios)
    logger.debug("sobolev: %d candidates, best #%d ratio %.6g", len(ratios), best, a)
    return SobolevEstimate(a, ScalarField(grid, candidates[best]), len(ratios), safety_factor, tuple(ratios))


# --------------------------------------------------------------------------
# space-time functionals and the Moser schedule
# --------------------------------------------------------------------------


def h_functional(f_series, phi, p: float, p_prime: float, tau: float, T: float, times,
                 metrics=None) -> float:
    """``int_tau^T int phi^(2 p') f^p dV_g(t) dt`` by trapezoidal time quadrature.

    ``f_series`` holds one array (or ScalarField) per time in ``times``;
    ``metrics`` is None (flat), one MetricField, or one per time.  The
    window endpoints are linearly interpolated between samples.
    """
    if not p >= p_prime >= 1.0:
        raise ValueError("need p >= p' >= 1")
    if not tau < T:
        raise ValueError("empty time window")
    times = np.asarray(times, dtype=float)
    if times.size < 2 or np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing with at least two samples")
    if tau < times[0] - 1e-12 or T > times[-1] + 1e-12:
        raise ValueError("time samples do not cover the window")
    phi_v = phi.phi.values if isinstance(phi, CutoffFunction) else np.asarray(phi, dtype=float)
    values = []
    grid = None
    for i, fv in enumerate(f_series):
        if isinstance(fv, ScalarField):
            grid = fv.grid
            fv = fv.values
        g = metrics[i] if isinstance(metrics, (list, tuple)) else metrics
        if g is not None:
            grid = g.grid
        if grid is None:
            raise ValueError("a grid is needed: pass ScalarFields or metrics")
        values.append(integrate_array(grid, phi_v ** (2.0 * p_prime) * np.abs(fv) ** p, g))
    values = np.asarray(values)
    if values.size != times.size:
        raise ValueError("one field per time sample required")
    inner = (times > tau) & (times < T)
    ts = np.concatenate([[tau], times[inner], [T]])
    vs = np.concatenate([[np.interp(tau, times, values)], values[inner], [np.interp(T, times, values)]])
    return float(np.trapezoid(vs, ts))


@dataclass(frozen=True)
class MoserSchedule:
    p0: float
    t: float
    nu: float
    eta: float
    p: np.ndarray
    p_prime: np.ndarray
    tau: np.ndarray

    def __len__(self) -> int:
        return int(self.p.size)


def moser_schedule(p0: float, t: float, nu: float = 1.5, cutoff: float = 1e-12) -> MoserSchedule:
    """Exponents ``p_k = p0 nu^k``, ``p'_k = (p0 - 2) nu^k + sum_{j<k} nu^j`` and
    times ``tau_k = t (1 - eta^-k)`` with ``eta = nu^6``, up to the first k
    with ``eta^-k < cutoff``."""
    if not p0 > 2:
        raise ValueError(f"p0 must exceed 2, got {p0}")
    if not t > 0:
        raise ValueError(f"t must be positive, got {t}")
    eta = nu ** 6
    kmax = 0
    while eta ** (-kmax) >= cutoff:
        kmax += 1
    k = np.arange(kmax + 1)
    p = p0 * nu ** k
    geometric = np.concatenate([[0.0], np.cumsum(nu ** k[:-1])])
    p_prime = (p0 - 2.0) * nu ** k + geometric
    tau = t * (1.0 - eta ** (-k.astype(float)))
    for arr in (p, p_prime, tau):
        arr.flags.writeable = False
    return MoserSchedule(p0, t, nu, eta, p, p_prime, tau)
