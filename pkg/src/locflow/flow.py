"""Localized Ricci flow ``dg/dt = -2 phi^2 Ric(g)``, directly and through the
regularized DeTurck-gauged system with a tracked diffeomorphism."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .curvature import _christoffel_array, ricci, ricci_tensor, riemann
from .cutoff import CutoffFunction, estimate_sobolev
from .grid import (
    COLLAR,
    ChartGrid,
    MetricField,
    TensorField,
    gradient_array,
    integrate_array,
    norm_squared_array,
    sym_index,
    sym_pack,
)

logger = logging.getLogger(__name__)

EIGEN_FLOOR = 1e-6  # reject when min eig(g) < EIGEN_FLOOR * min eig(g0)
MAX_GAUGE_CELLS = 1.0  # reject when the gauge moves more than this per step


class StepFailure(RuntimeError):
    """A rejected time step; ``diagnostic`` names the offending quantity."""

    def __init__(self, message: str, diagnostic: dict | None = None):
        super().__init__(message)
        self.diagnostic = dict(diagnostic or {})


@dataclass(frozen=True, eq=False)
class FlowState:
    t: float
    g: MetricField
    g0: MetricField
    hat_g: MetricField
    epsilon: float = 0.0
    gauge_displacement: np.ndarray | None = None
    dt_last: float = 0.0

    @classmethod
    def initial(cls, g0: MetricField, epsilon: float = 0.0, hat_g: MetricField | None = None,
                gauge: bool = False) -> "FlowState":
        disp = np.zeros(g0.grid.shape + (g0.dimension,)) if gauge else None
        return cls(0.0, g0, g0, g0 if hat_g is None else hat_g, float(epsilon), disp)


# --------------------------------------------------------------------------
# DeTurck field and Lie derivative
# --------------------------------------------------------------------------


def _hat_covariant_derivative(g: MetricField, hat_gamma: np.ndarray) -> np.ndarray:
    """``c[k, j, l] = g_jl;k = d_k g_jl - g_sl hatG^s_kj - g_js hatG^s_kl``."""
    gm = g.matrix
    dg = gradient_array(g.grid, g.components)[..., sym_index(g.dimension)]
    return (dg - np.einsum("...sl,...skj->...kjl", gm, hat_gamma)
            - np.einsum("...js,...skl->...kjl", gm, hat_gamma))


def deturck_vector_field(g: MetricField, hat_g: MetricField) -> TensorField:
    """``X^p = -g^pi g^kl (g_ik,l - 1/2 g_kl,i)`` with ``hat_g``-covariant commas."""
    if g.grid != hat_g.grid:
        raise ValueError("metrics live on different grids")
    if hat_g is g:
        return TensorField(g.grid, np.zeros(g.grid.shape + (g.dimension,)), ("u",))
    cov = _hat_covariant_derivative(g, _christoffel_array(hat_g))
    ginv = g.inverse
    # v_i = g^kl (g_ik;l - 1/2 g_kl;i)
    v = (np.einsum("...kl,...lik->...i", ginv, cov)
         - 0.5 * np.einsum("...kl,...ikl->...i", ginv, cov))
    x = -np.einsum("...pi,...i->...p", ginv, v)
    return TensorField(g.grid, x, ("u",))


def lie_derivative_metric(x: TensorField, g: MetricField) -> TensorField:
    """``(L_X g)_kl = d_k X^p g_pl + d_l X^p g_kp + X^p d_p g_kl``."""
    xv = x.components
    dx = gradient_array(g.grid, xv)  # [k, p] = d_k X^p
    gm = g.matrix
    a = np.einsum("...kp,...pl->...kl", dx, gm)
    dg = gradient_array(g.grid, g.components)  # [p, c]
    adv = np.einsum("...p,...pc->...c", xv, dg)
    packed = sym_pack(a + np.swapaxes(a, -1, -2)) + adv
    return TensorField(g.grid, packed, ("d", "d"), ((0, 1),))


# --------------------------------------------------------------------------
# right-hand sides
# --------------------------------------------------------------------------


def _frozen_mask(grid: ChartGrid) -> np.ndarray | None:
    if grid.periodic:
        return None
    return grid.interior_mask(COLLAR)


def _phi_squared(phi) -> np.ndarray:
    if isinstance(phi, CutoffFunction):
        return phi.phi.values ** 2
    return np.asarray(phi, dtype=float) ** 2


def direct_rhs(g: MetricField, phi2: np.ndarray) -> np.ndarray:
    """Packed ``-2 phi^2 Ric(g)`` (zero on the frozen collar)."""
    ric = sym_pack(ricci_tensor(g))
    rhs = -2.0 * phi2[..., None] * ric
    mask = _frozen_mask(g.grid)
    if mask is not None:
        rhs = np.where(mask[..., None], rhs, 0.0)
    return rhs


def _interp(grid: ChartGrid, values: np.ndarray, points: np.ndarray, order: int = 3) -> np.ndarray:
    """Cubic-spline interpolation of node-major ``values`` at chart ``points``."""
    n = grid.dimension
    coords = [(points[..., a] - grid.origin[a]) / grid.spacing[a] for a in range(n)]
    mode = "grid-wrap" if grid.periodic else "nearest"
    comp_shape = values.shape[n:]
    flat = values.reshape(grid.shape + (-1,))
    out = np.empty(points.shape[:-1] + (flat.shape[-1],))
    for c in range(flat.shape[-1]):
        out[..., c] = ndimage.map_coordinates(flat[..., c], coords, order=order, mode=mode)
    return out.reshape(points.shape[:-1] + comp_shape)


def _node_points(grid: ChartGrid) -> np.ndarray:
    return np.stack(np.meshgrid(*[grid.coordinates(a) for a in range(grid.dimension)],
                                indexing="ij"), axis=-1)


def inverse_map(grid: ChartGrid, disp: np.ndarray, iterations: int = 30, tol: float = 1e-12) -> np.ndarray:
    """Solve ``x + D(x) = y`` for each node ``y`` by fixed-point iteration."""
    y = _node_points(grid)
    x = y - disp
    for _ in range(iterations):
        new = y - _interp(grid, disp, x)
        step = float(np.max(np.abs(new - x))) if new.size else 0.0
        x = new
        if step < tol:
            break
    return x


def _check_inside(grid: ChartGrid, points: np.ndarray) -> None:
    if grid.periodic:
        return
    for a in range(grid.dimension):
        lo = grid.origin[a]
        hi = lo + grid.lengths[a]
        if np.any(points[..., a] < lo - 1e-12) or np.any(points[..., a] > hi + 1e-12):
            raise StepFailure("gauge displacement leaves the grid", {"axis": a})


def deturck_rhs(gbar: MetricField, hat_g: MetricField, psi2: np.ndarray):
    """Packed ``psi^2 (-2 Ric - L_X gbar) - P`` and the gauge velocity ``psi^2 X``."""
    grid = gbar.grid
    x = deturck_vector_field(gbar, hat_g)
    ric = sym_pack(ricci_tensor(gbar))
    lie = lie_derivative_metric(x, gbar).components
    dpsi = gradient_array(grid, psi2)  # [i]
    xflat = np.einsum("...jp,...p->...j", gbar.matrix, x.components)  # gbar(X, d_j)
    pmat = np.einsum("...i,...j->...ij", dpsi, xflat)
    p = sym_pack(pmat + np.swapaxes(pmat, -1, -2))
    rhs = psi2[..., None] * (-2.0 * ric - lie) - p
    vel = psi2[..., None] * x.components
    mask = _frozen_mask(grid)
    if mask is not None:
        rhs = np.where(mask[..., None], rhs, 0.0)
        vel = np.where(mask[..., None], vel, 0.0)
    return rhs, vel


def _validated(grid, packed, g0: MetricField, t: float) -> MetricField:
    if not np.all(np.isfinite(packed)):
        raise StepFailure("non-finite metric component", {"t": t})
    g = MetricField(grid, packed, validate=False)
    floor = EIGEN_FLOOR * g0.min_eigenvalue
    low = float(np.min(np.linalg.eigvalsh(g.matrix)))
    if not low > floor:
        raise StepFailure("metric lost positive definiteness",
                          {"t": t, "min_eigenvalue": low, "floor": floor})
    return g


def _rk4(y, f, dt):
    k1 = f(y)
    k2 = f(tuple(a + 0.5 * dt * b for a, b in zip(y, k1)))
    k3 = f(tuple(a + 0.5 * dt * b for a, b in zip(y, k2)))
    k4 = f(tuple(a + dt * b for a, b in zip(y, k3)))
    return tuple(a + (dt / 6.0) * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
                 for a, b1, b2, b3, b4 in zip(y, k1, k2, k3, k4))


def step_direct(state: FlowState, phi, dt: float) -> FlowState:
    """One classical RK4 step of ``dg/dt = -2 phi^2 Ric(g)``.

    Nodes with ``phi = 0`` receive exactly zero increments, so the metric
    there stays bit-identical.
    """
    grid = state.g.grid
    phi2 = _phi_squared(phi)

    def f(y):
        return (direct_rhs(MetricField(grid, y[0], validate=False), phi2),)

    (packed,) = _rk4((state.g.components,), f, dt)
    g = _validated(grid, packed, state.g0, state.t + dt)
    return replace(state, t=state.t + dt, g=g, dt_last=dt)


def _psi_squared(grid, phi, disp, epsilon):
    phi_v = phi.phi.values if isinstance(phi, CutoffFunction) else np.broadcast_to(
        np.asarray(phi, dtype=float), grid.shape)
    if disp is None or not np.any(disp):
        pulled = phi_v
    else:
        pre = inverse_map(grid, disp)
        pulled = np.clip(_interp(grid, phi_v, pre), 0.0, 1.0)
    return pulled ** 2 + epsilon ** 2


def step_deturck(state: FlowState, phi, dt: float) -> FlowState:
    """One RK4 step of the gauged system together with the gauge ODE.

    The state's metric is the gauged metric; the gauge displacement
    ``D = Phi - id`` obeys ``dD/dt (x) = psi^2 X (x + D(x))``.
    """
    grid = state.g.grid
    disp0 = state.gauge_displacement
    if disp0 is None:
        disp0 = np.zeros(grid.shape + (grid.dimension,))
    nodes = _node_points(grid)

    def f(y):
        packed, disp = y
        gbar = MetricField(grid, packed, validate=False)
        psi2 = _psi_squared(grid, phi, disp, state.epsilon)
        rhs, vel = deturck_rhs(gbar, state.hat_g, psi2)
        if np.any(vel):
            vel = _interp(grid, vel, nodes + disp)
        return rhs, vel

    packed, disp = _rk4((state.g.components, disp0), f, dt)
    moved = float(np.max(np.abs(disp - disp0))) if disp.size else 0.0
    if moved > MAX_GAUGE_CELLS * min(grid.spacing):
        raise StepFailure("gauge moved more than one cell in a step",
                          {"t": state.t + dt, "displacement": moved})
    _check_inside(grid, nodes + disp)
    g = _validated(grid, packed, state.g0, state.t + dt)
    return replace(state, t=state.t + dt, g=g, gauge_displacement=disp, dt_last=dt)


def gauge_pullback(state: FlowState) -> MetricField:
    """``Phi^* gbar``: ``g(x) = J^T gbar(Phi(x)) J`` with ``J = I + dD``."""
    grid = state.g.grid
    disp = state.gauge_displacement
    if disp is None or not np.any(disp):
        return state.g
    points = _node_points(grid) + disp
    _check_inside(grid, points)
    gbar = _interp(grid, state.g.matrix, points)
    jac = np.einsum("...ka->...ak", gradient_array(grid, disp))  # [a, k] = d_k D^a
    jac = jac + np.eye(grid.dimension)
    out = np.einsum("...ai,...ab,...bj->...ij", jac, gbar, jac)
    return MetricField.from_matrix(grid, 0.5 * (out + np.swapaxes(out, -1, -2)))


def pullback_linear(g: MetricField, matrix) -> MetricField:
    """Pullback of ``g`` under the linear map ``x -> M x`` about the grid origin
    (closed form for constant metrics: ``M^T g M``)."""
    m = np.asarray(matrix, dtype=float)
    grid = g.grid
    pts = np.einsum("ab,...b->...a", m, _node_points(grid))
    vals = _interp(grid, g.matrix, pts)
    out = np.einsum("ai,...ab,bj->...ij", m, vals, m)
    return MetricField.from_matrix(grid, out)


# --------------------------------------------------------------------------
# trajectories
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FlowConfig:
    mode: str = "direct"
    epsilon: float = 0.0
    T_target: float = 0.1
    cfl: float = 0.1
    record_stride: int = 1
    dt_max: float | None = None
    sobolev_budget: int = 0
    keep_snapshots: bool = False
    max_steps: int = 1_000_000
    sobolev_drift_limit: float = 4.0
    equivalence_bounds: tuple = (0.5, 2.0)


@dataclass
class FlowTrajectory:
    times: list = field(default_factory=list)
    dt: list = field(default_factory=list)
    sup_phi2_rm: list = field(default_factory=list)
    l2_rm_supp: list = field(default_factory=list)
    eig_min_ratio: list = field(default_factory=list)
    eig_max_ratio: list = field(default_factory=list)
    sobolev_a: list = field(default_factory=list)
    vol_ball: list = field(default_factory=list)
    vol_element_min: list = field(default_factory=list)
    vol_element_max: list = field(default_factory=list)
    vol_rate_excess: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    failure: str | None = None
    failure_time: float | None = None
    conditions: dict = field(default_factory=dict)
    final_state: FlowState | None = None
    sup_grad_phi: float = 0.0

    COLUMNS = ("t", "dt", "sup_phi2_Rm", "L2_Rm_supp", "eig_min_ratio", "eig_max_ratio",
               "sobolev_A", "vol_ball")

    def rows(self):
        for i in range(len(self.times)):
            yield (self.times[i], self.dt[i], self.sup_phi2_rm[i], self.l2_rm_supp[i],
                   self.eig_min_ratio[i], self.eig_max_ratio[i], self.sobolev_a[i], self.vol_ball[i])

    def __len__(self) -> int:
        return len(self.times)


def equivalence_eigenvalues(g: MetricField, g0: MetricField) -> np.ndarray:
    """Eigenvalues of ``g0^-1 g`` per node, ascending."""
    linv = np.linalg.inv(np.linalg.cholesky(g0.matrix))
    m = linv @ g.matrix @ np.swapaxes(linv, -1, -2)
    return np.linalg.eigvalsh(0.5 * (m + np.swapaxes(m, -1, -2)))


def _diagnostics(state: FlowState, phi, support: np.ndarray, witness):
    g = state.g
    grid = g.grid
    rm = riemann(g)
    rm2 = norm_squared_array(rm, g)
    ric = ricci(g, rm).full()
    mixed = np.matmul(g.inverse, ric)
    ric_norm = np.sqrt(np.maximum(np.sum(mixed * np.swapaxes(mixed, -1, -2), axis=(-2, -1)), 0.0))
    phi2 = _phi_squared(phi)
    eig = equivalence_eigenvalues(g, state.g0)
    ratio = g.sqrt_det / state.g0.sqrt_det
    return {
        "sup_phi2_rm": float(np.max(phi2 * np.sqrt(rm2))),
        "l2_rm_supp": math.sqrt(max(integrate_array(grid, np.where(support, rm2, 0.0), g), 0.0)),
        "eig_min": float(np.min(eig[..., 0])),
        "eig_max": float(np.max(eig[..., -1])),
        "vol_ball": integrate_array(grid, support.astype(float), g),
        "vol_min": float(np.min(ratio)),
        "vol_max": float(np.max(ratio)),
        "log_vol": np.log(g.sqrt_det),
        "ric_bound": 2.0 * phi2 * ric_norm,
    }


def stable_dt(g: MetricField, weight2: np.ndarray, cfl: float) -> float:
    """``cfl h^2 / max(weight^2 |g^-1|)``; infinite when the weight vanishes."""
    inv_norm = 1.0 / np.linalg.eigvalsh(g.matrix)[..., 0]
    scale = float(np.max(weight2 * inv_norm))
    if scale <= 0.0:
        return math.inf
    return cfl * min(g.grid.spacing) ** 2 / scale


def run_flow(g0: MetricField, phi, config: FlowConfig = FlowConfig(),
             hat_g: MetricField | None = None) -> FlowTrajectory:
    """Evolve ``g0`` to ``config.T_target`` recording diagnostics every
    ``record_stride`` steps (plus t = 0 and the final time).

    A StepFailure at t = 0 is re-raised; later failures end the run and are
    recorded on the trajectory.  ``conditions`` holds, per monitored
    condition (Sobolev drift, metric equivalence, L2 curvature), the first
    sample time at which it failed, or None.
    """
    if config.mode not in ("direct", "deturck"):
        raise ValueError(f"unknown flow mode {config.mode!r}")
    deturck = config.mode == "deturck"
    state = FlowState.initial(g0, config.epsilon if deturck else 0.0, hat_g, gauge=deturck)
    grid = g0.grid
    phi_v = phi.phi.values if isinstance(phi, CutoffFunction) else np.broadcast_to(
        np.asarray(phi, dtype=float), grid.shape)
    support = phi_v > 0.0
    traj = FlowTrajectory()
    traj.sup_grad_phi = phi.sup_grad if isinstance(phi, CutoffFunction) else 0.0
    prev = {}
    witness = [None]
    sob_domain = phi if isinstance(phi, CutoffFunction) and math.isfinite(phi.support_radius) else None

    def record(st: FlowState, dt: float):
        obs = state_for_diagnostics(st)
        d = _diagnostics(obs, phi, support, witness[0])
        a = math.nan
        if config.sobolev_budget > 0:
            est = estimate_sobolev(obs.g, sob_domain, budget=config.sobolev_budget,
                                   refinements=2, start=witness[0])
            witness[0] = est.witness.values
            a = est.constant
        excess = 0.0
        if prev:
            rate = np.abs(d["log_vol"] - prev["log_vol"]) / (st.t - prev["t"])
            bound = np.maximum(d["ric_bound"], prev["ric_bound"])
            excess = float(np.max(rate - bound))
        prev.update(t=st.t, log_vol=d["log_vol"], ric_bound=d["ric_bound"])
        traj.times.append(st.t)
        traj.dt.append(dt)
        traj.sup_phi2_rm.append(d["sup_phi2_rm"])
        traj.l2_rm_supp.append(d["l2_rm_supp"])
        traj.eig_min_ratio.append(d["eig_min"])
        traj.eig_max_ratio.append(d["eig_max"])
        traj.sobolev_a.append(a)
        traj.vol_ball.append(d["vol_ball"])
        traj.vol_element_min.append(d["vol_min"])
        traj.vol_element_max.append(d["vol_max"])
        traj.vol_rate_excess.append(excess)
        if config.keep_snapshots:
            traj.snapshots.append(obs.g)

    def state_for_diagnostics(st: FlowState) -> FlowState:
        if deturck and st.gauge_displacement is not None:
            return replace(st, g=gauge_pullback(st))
        return st

    record(state, 0.0)
    steps = 0
    while state.t < config.T_target * (1 - 1e-12) and steps < config.max_steps:
        if deturck:
            weight2 = _psi_squared(grid, phi, state.gauge_displacement, state.epsilon)
        else:
            weight2 = phi_v ** 2
        dt = stable_dt(state.g, weight2, config.cfl)
        if config.dt_max is not None:
            dt = min(dt, config.dt_max)
        remaining = config.T_target - state.t
        # equal steps to the target instead of a tiny final step
        dt = remaining / math.ceil(remaining / dt) if dt < remaining else remaining
        try:
            state = step_deturck(state, phi, dt) if deturck else step_direct(state, phi, dt)
        except StepFailure as exc:
            if steps == 0:
                raise
            traj.failure = str(exc)
            traj.failure_time = state.t
            logger.warning("flow stopped at t=%.6g: %s", state.t, exc)
            break
        steps += 1
        if steps % config.record_stride == 0 or state.t >= config.T_target * (1 - 1e-12):
            record(state, dt)
    traj.final_state = state
    traj.conditions = flow_condition_failures(traj, config)
    return traj


def flow_condition_failures(traj: FlowTrajectory, config: FlowConfig = FlowConfig()) -> dict:
    """First sample time at which each monitored condition fails (None if never)."""
    lo, hi = config.equivalence_bounds
    out = {"sobolev_drift": None, "metric_equivalence": None, "l2_curvature": None}
    a0 = traj.sobolev_a[0] if traj.sobolev_a else math.nan
    l0 = traj.l2_rm_supp[0] if traj.l2_rm_supp else 0.0
    for i, t in enumerate(traj.times):
        a = traj.sobolev_a[i]
        if out["sobolev_drift"] is None and math.isfinite(a) and a0 > 0 and a / a0 > config.sobolev_drift_limit:
            out["sobolev_drift"] = t
        if out["metric_equivalence"] is None and not (lo <= traj.eig_min_ratio[i] and traj.eig_max_ratio[i] <= hi):
            out["metric_equivalence"] = t
        if out["l2_curvature"] is None and traj.l2_rm_supp[i] > math.e * l0 + 1e-14:
            out["l2_curvature"] = t
    return out
