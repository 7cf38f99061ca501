"""Empirical checks of the local smoothing and volume-growth estimates.

The estimates being checked hold with unspecified constants, so every check
here is a shape or stability check: the unknown constant is fitted from the
data (``C* = LHS / RHS``) and the verdict asks that it stays bounded under
refinement, scaling or time.  A report's verdict is recomputable from its
recorded ``lhs``, ``rhs`` and ``tolerance``: it passes iff
``lhs <= rhs + tolerance`` holds entrywise.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .curvature import curvature_pack
from .cutoff import (CutoffFunction, cutoff_from_values, estimate_sobolev, h_functional,
                     make_cutoff, moser_schedule)
from .flow import FlowConfig, FlowTrajectory, run_flow
from .geometry import (ball_weights, geodesic_distance, local_box, resample_metric,
                       volume_growth_table)
from .grid import (COLLAR, ChartGrid, GridError, MetricField, ScalarField, gradient_norm_squared,
                   integrate_array, laplace_beltrami, norm_squared_array)

logger = logging.getLogger(__name__)

PASS, FAIL, REPORT, UNMET = "pass", "fail", "report", "hypothesis_unmet"
ZERO_FLOOR = 1e-10  # curvature integrals below this count as exact zeros


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


def evaluate_verdict(lhs, rhs, tolerance) -> str:
    lhs = np.atleast_1d(np.asarray(lhs, dtype=float))
    rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
    tol = np.broadcast_to(np.asarray(tolerance, dtype=float), lhs.shape)
    ok = np.all(np.isfinite(lhs)) and np.all(np.isfinite(rhs)) and bool(np.all(lhs <= rhs + tol))
    return PASS if ok else FAIL


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return x


def digest(*items) -> str:
    """Stable hash of arrays, fields and plain values."""
    h = hashlib.sha256()
    for item in items:
        if isinstance(item, MetricField):
            item = item.components
        elif isinstance(item, ScalarField):
            item = item.values
        elif isinstance(item, CutoffFunction):
            item = item.phi.values
        if isinstance(item, np.ndarray):
            a = np.ascontiguousarray(item, dtype=float)
            h.update(str(a.shape).encode())
            h.update(a.tobytes())
        else:
            h.update(json.dumps(_jsonable(item), sort_keys=True).encode())
    return h.hexdigest()[:16]


@dataclass
class VerificationReport:
    """One check: compared quantities, fitted constants and the verdict.

    ``report_only`` checks carry the verdict ``report`` and never fail a
    suite.  ``hypothesis_unmet`` marks a check whose input did not satisfy
    the estimate's hypotheses (distinct from a failed conclusion).
    """

    check: str
    inputs_digest: str
    lhs: object
    rhs: object
    tolerance: object = 0.0
    fitted: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)
    report_only: bool = False
    hypothesis_met: bool = True
    verdict: str = ""

    def __post_init__(self):
        if not self.verdict:
            self.verdict = self.evaluate()

    def evaluate(self) -> str:
        if not self.hypothesis_met:
            return UNMET
        if self.report_only:
            return REPORT
        return evaluate_verdict(self.lhs, self.rhs, self.tolerance)

    @property
    def passed(self) -> bool:
        return self.verdict in (PASS, REPORT)

    def to_dict(self) -> dict:
        return _jsonable({
            "check": self.check, "inputs_digest": self.inputs_digest, "lhs": self.lhs,
            "rhs": self.rhs, "tolerance": self.tolerance, "fitted": self.fitted,
            "details": self.details, "report_only": self.report_only,
            "hypothesis_met": self.hypothesis_met, "verdict": self.verdict,
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "VerificationReport":
        def num(v):
            if isinstance(v, list):
                return [num(x) for x in v]
            if v in ("nan", "inf", "-inf"):
                return float(v)
            return v

        return cls(data["check"], data["inputs_digest"], num(data["lhs"]), num(data["rhs"]),
                   num(data["tolerance"]), data.get("fitted", {}), data.get("details", {}),
                   data.get("report_only", False), data.get("hypothesis_met", True), data["verdict"])


def _ratio_spread(values) -> float:
    """``max / min`` of positive values (1 for fewer than two values)."""
    v = np.asarray([x for x in values if x > 0], dtype=float)
    if v.size < 2:
        return 1.0
    return float(v.max() / v.min())


# --------------------------------------------------------------------------
# integration by parts lemma
# --------------------------------------------------------------------------


def ibp_terms(f: np.ndarray, psi: np.ndarray, p: float, grid: ChartGrid, g: MetricField | None = None):
    """Quadratures of ``int |grad(psi f^(p/2))|^2``, ``int psi^2 f^(p-1) (-Lap f)``
    and ``int |grad psi|^2 f^p``."""
    w = psi * f ** (0.5 * p)
    lhs = integrate_array(grid, gradient_norm_squared(grid, w, g), g)
    lap_term = integrate_array(grid, psi ** 2 * f ** (p - 1.0) * (-laplace_beltrami(grid, f, g)), g)
    grad_term = integrate_array(grid, gradient_norm_squared(grid, psi, g) * f ** p, g)
    return lhs, lap_term, grad_term


def ibp_coefficients(p: float) -> tuple:
    return p * p / (2.0 * (p - 1.0)), 1.0 + 1.0 / (p - 1.0) ** 2


def calibrate_ibp_margin(grid: ChartGrid, safety: float = 10.0) -> float:
    """``C_disc`` from the discrete defect of the exact identity
    ``int |grad w|^2 = -int w Lap w`` on a fixed smooth reference input.

    The returned constant multiplies ``h^2 (|LHS| + |RHS|)``.
    """
    x = grid.mesh(sparse=True)
    f = 1.5 + 0.5 * np.sin(x[0]) * np.cos(x[1] if grid.dimension > 1 else 0.0)
    psi = np.cos(x[0] + (x[1] if grid.dimension > 1 else 0.0))
    w = psi * f ** 1.5
    a = integrate_array(grid, gradient_norm_squared(grid, w))
    b = -integrate_array(grid, w * laplace_beltrami(grid, w))
    h2 = max(grid.spacing) ** 2
    defect = abs(a - b) / (h2 * (abs(a) + abs(b)))
    return safety * max(defect, 1e-3)


def check_ibp_lemma(f, psi, p: float, g: MetricField | None = None, grid: ChartGrid | None = None,
                    c_disc: float | None = None, coefficients: tuple | None = None,
                    f_min: float = 1e-8) -> VerificationReport:
    """Integration-by-parts inequality for ``psi f^(p/2)``.

    Passes iff ``LHS <= c1 int psi^2 f^(p-1)(-Lap f) + c2 int |grad psi|^2 f^p
    + C_disc h^2 (|LHS| + |RHS|)`` with ``c1 = p^2 / (2(p-1))`` and
    ``c2 = 1 + 1/(p-1)^2``.  ``coefficients`` overrides ``(c1, c2)`` for
    negative controls.
    """
    if grid is None:
        grid = g.grid if g is not None else getattr(f, "grid", None)
    if grid is None:
        raise ValueError("a grid is needed")
    fv = f.values if isinstance(f, ScalarField) else np.broadcast_to(np.asarray(f, dtype=float), grid.shape)
    pv = psi.values if isinstance(psi, ScalarField) else np.broadcast_to(np.asarray(psi, dtype=float), grid.shape)
    if not p > 1:
        raise ValueError(f"p must exceed 1, got {p}")
    if np.any(fv < 0):
        raise ValueError("f must be nonnegative")
    if p < 2 and float(np.min(fv)) <= f_min:
        raise ValueError("f touches zero while p < 2 (f^(p-2) blows up)")
    lhs, lap_term, grad_term = ibp_terms(fv, pv, p, grid, g)
    c1, c2 = ibp_coefficients(p) if coefficients is None else coefficients
    rhs = c1 * lap_term + c2 * grad_term
    if c_disc is None:
        c_disc = calibrate_ibp_margin(grid)
    tol = c_disc * max(grid.spacing) ** 2 * (abs(lhs) + abs(rhs))
    return VerificationReport(
        "ibp_lemma", digest(fv, pv, p, g if g is not None else 0), lhs, rhs, tol,
        fitted={"c_disc": c_disc},
        details={"p": p, "laplacian_term": lap_term, "gradient_term": grad_term,
                 "coefficients": [c1, c2], "control": coefficients is not None})


def ibp_corpus(grid: ChartGrid, count: int = 200, seed: int = 20240601, modes: int = 4,
               wavenumber: int = 3):
    """Seeded ``(f, psi, p)`` cases of random trig polynomials, ``f >= 1/2``."""
    rng = np.random.default_rng(seed)
    x = grid.mesh(sparse=True)
    cases = []

    def trig():
        out = np.zeros(grid.shape)
        total = 0.0
        for _ in range(modes):
            k = rng.integers(-wavenumber, wavenumber + 1, size=grid.dimension)
            c = rng.uniform(-1.0, 1.0)
            ph = rng.uniform(0.0, 2.0 * math.pi)
            out = out + c * np.cos(sum(float(k[a]) * x[a] for a in range(grid.dimension)) + ph)
            total += abs(c)
        return out / max(total, 1e-12)

    for _ in range(count):
        f = 1.0 + 0.5 * trig()
        psi = trig()
        p = float(rng.choice([2.0, 3.0, 4.0]))
        cases.append((f, psi, p))
    return cases


def ibp_negative_controls(grid: ChartGrid):
    """Three tampered inequalities that must fail, as ``(f, psi, p, coefficients)``."""
    x = grid.mesh(sparse=True)
    one = np.ones(grid.shape)
    psi = np.sin(x[0]) * np.cos(x[1])
    f = 1.0 + 0.5 * np.sin(x[0] + 2.0 * x[1])
    c1, c2 = ibp_coefficients(3.0)
    return [
        # f = 1: LHS = int |grad psi|^2 but the gradient coefficient is halved
        (one, psi, 3.0, (c1, 0.5)),
        # psi = 1: LHS = int |grad f^(3/2)|^2 > 0 but the Laplacian term is dropped
        (f, one, 3.0, (0.0, c2)),
        # psi = 1 with the Laplacian term's sign reversed makes the RHS negative
        (f, one, 3.0, (-c1, c2)),
    ]


# --------------------------------------------------------------------------
# heat-flow witnesses and the sup bound
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HeatFlowWitness:
    """Time series ``f(t), u(t)`` with cutoff, metrics and coefficients of the
    parabolic inequality ``f_t <= phi^2 (Lap f + u f) + 2a phi|grad phi||grad f|
    + b(|grad phi|^2 - phi Lap phi) f``."""

    times: np.ndarray
    f: list
    u: list
    phi: CutoffFunction
    metrics: list
    a: float = 0.0
    b: float = 0.0
    c: float = 0.0
    mu: float = 0.0
    A: float = 1.0

    @property
    def grid(self) -> ChartGrid:
        return self.phi.grid

    def metric_at(self, i: int) -> MetricField | None:
        if not self.metrics:
            return None
        return self.metrics[i] if len(self.metrics) > 1 else self.metrics[0]

    def inequality_residual(self, i: int) -> np.ndarray:
        """RHS minus the centred time difference of ``f`` at interior sample ``i``."""
        grid = self.grid
        g = self.metric_at(i)
        fv = self.f[i]
        phi = self.phi.phi.values
        dfdt = (self.f[i + 1] - self.f[i - 1]) / (self.times[i + 1] - self.times[i - 1])
        rhs = phi ** 2 * (laplace_beltrami(grid, fv, g) + self.u[i] * fv)
        rhs = rhs + 2.0 * self.a * phi * self.phi.grad_norm.values * np.sqrt(gradient_norm_squared(grid, fv, g))
        rhs = rhs + self.b * (self.phi.grad_norm.values ** 2 - phi * self.phi.laplacian.values) * fv
        return rhs - dfdt

    def validate(self, tol: float = 1e-2) -> float:
        """Worst residual over interior samples; raises if below ``-tol``."""
        if any(np.any(np.asarray(v) < 0) for v in self.f) or any(np.any(np.asarray(v) < 0) for v in self.u):
            raise ValueError("witness fields must be nonnegative")
        worst = math.inf
        mask = self.grid.interior_mask()
        scale = max(float(np.max(np.abs(v))) for v in self.f) or 1.0
        for i in range(1, len(self.times) - 1):
            worst = min(worst, float(np.min(self.inequality_residual(i)[mask])) / scale)
        if worst < -tol:
            raise ValueError(f"witness violates the parabolic inequality (residual {worst:.3e})")
        return worst


def fit_mu(witness_u, phi: CutoffFunction, times, metrics=None) -> float:
    """``max_t t^(1/3) (int phi^2 u^3)^(1/3)`` over the samples."""
    grid = phi.grid
    best = 0.0
    for i, t in enumerate(times):
        g = metrics[i] if isinstance(metrics, (list, tuple)) and len(metrics) > 1 else (
            metrics[0] if metrics else None)
        val = integrate_array(grid, phi.phi.values ** 2 * np.asarray(witness_u[i]) ** 3, g)
        best = max(best, (max(t, 0.0) * max(val, 0.0)) ** (1.0 / 3.0))
    return best


def heat_equation_witness(grid: ChartGrid, T: float = 0.5, samples: int = 1001, seed: int = 3,
                          modes: int = 4, wavenumber: int = 2, A: float | None = None) -> HeatFlowWitness:
    """Exact spectral solution of ``f_t = Lap f`` on the flat periodic chart
    with ``phi = 1`` and ``u = 0``; ``f(0) = 1 + 0.9 * (normalised trig poly)``.

    ``A`` defaults to the Sobolev estimate of the flat chart.
    """
    if not grid.periodic:
        raise GridError("the heat-equation witness needs a periodic grid")
    rng = np.random.default_rng(seed)
    x = grid.mesh(sparse=True)
    lengths = grid.lengths
    terms = []
    total = 0.0
    for _ in range(modes):
        k = rng.integers(-wavenumber, wavenumber + 1, size=grid.dimension)
        if not np.any(k):
            k[0] = 1
        c = rng.uniform(-1.0, 1.0)
        ph = rng.uniform(0.0, 2.0 * math.pi)
        wave = [2.0 * math.pi * float(k[a]) / lengths[a] for a in range(grid.dimension)]
        arg = sum(wave[a] * (x[a] - grid.origin[a]) for a in range(grid.dimension)) + ph
        terms.append((c, sum(w * w for w in wave), np.cos(arg)))
        total += abs(c)
    times = np.linspace(0.0, T, samples)
    f = []
    for t in times:
        val = np.ones(grid.shape)
        for c, k2, wave in terms:
            val = val + 0.9 * c / total * math.exp(-k2 * t) * wave
        f.append(val)
    u = [np.zeros(grid.shape) for _ in times]
    phi = cutoff_from_values(np.ones(grid.shape), grid)
    g = MetricField.flat(grid)
    if A is None:
        A = estimate_sobolev(g, budget=6, refinements=2).constant
    return HeatFlowWitness(times, f, u, phi, [g], 0.0, 0.0, 0.0, 0.0, float(A))


def heat_witness_family(extents=(32, 64, 128), **kwargs) -> list:
    """Heat-equation witnesses of one problem on a dyadic family of periodic
    2D grids, sharing the Sobolev constant estimated on the finest grid."""
    grids = [ChartGrid((n, n), (2.0 * math.pi / n,) * 2) for n in extents]
    A = kwargs.pop("A", None)
    if A is None:
        A = estimate_sobolev(MetricField.flat(grids[-1]), budget=6, refinements=2).constant
    return [heat_equation_witness(g, A=A, **kwargs) for g in grids]


def _space_integrals(witness: HeatFlowWitness, p: float, p_prime: float) -> np.ndarray:
    """``int phi^(2 p') f^p dV_g`` at every sample."""
    grid = witness.grid
    weight = witness.phi.phi.values ** (2.0 * p_prime)
    return np.array([integrate_array(grid, weight * np.abs(fv) ** p, witness.metric_at(i))
                     for i, fv in enumerate(witness.f)])


def sup_bound_constant(witness: HeatFlowWitness, p0: float, stride: int = 1):
    """Fitted ``C* = max_t LHS / RHS`` of the sup bound and the per-time ratios."""
    if not p0 > 2:
        raise ValueError(f"p0 must exceed 2, got {p0}")
    phi = witness.phi.phi.values
    grad2 = witness.phi.sup_grad ** 2
    A, mu = witness.A, witness.mu
    times = np.asarray(witness.times, dtype=float)
    space = _space_integrals(witness, p0, p0 - 2.0)
    cumulative = np.concatenate([[0.0], np.cumsum(0.5 * (space[1:] + space[:-1]) * np.diff(times))])
    ratios = []
    best = 0.0
    for i in range(1, len(times), stride):
        t = float(times[i])
        lhs = float(np.max(np.abs(phi ** 2 * witness.f[i])))
        integral = cumulative[i]
        rhs = (A ** (2.0 / p0) * (grad2 + (1.0 + A * A * mu ** 3) / t) ** (3.0 / p0)
               * max(integral, 0.0) ** (1.0 / p0))
        if rhs <= 0.0:
            if lhs > 0.0:
                raise ValueError(f"sup-bound right side vanishes at t={t:g} while the left side does not")
            ratios.append(0.0)
            continue
        ratios.append(lhs / rhs)
        best = max(best, lhs / rhs)
    return best, ratios


def h_recursion_constants(witness: HeatFlowWitness, p0: float, steps: int = 3,
                          min_window_samples: int = 4) -> list:
    """Fitted per-step constants of the H recursion along the Moser schedule.

    With ``t`` the final witness time and ``H_k = H(p_k, p'_k, tau_k)`` the
    step constant is ``H_(k+1) / (A [|grad phi|^2 + (1 + mu^3 A^2) eta/(eta-1) / t]^nu
    eta^(k nu) H_k^nu)``.  Steps whose window holds fewer than
    ``min_window_samples`` samples are not fitted.
    """
    times = witness.times
    t = float(times[-1])
    sched = moser_schedule(p0, t)
    nu, eta = sched.nu, sched.eta
    A, mu = witness.A, witness.mu
    bracket = witness.phi.sup_grad ** 2 + (1.0 + mu ** 3 * A * A) * eta / (eta - 1.0) / t
    metrics = witness.metrics if len(witness.metrics) > 1 else (witness.metrics[0] if witness.metrics else None)
    dt = (times[-1] - times[0]) / max(len(times) - 1, 1)

    def H(k):
        return h_functional(witness.f, witness.phi, float(sched.p[k]), float(sched.p_prime[k]),
                            float(sched.tau[k]), t, times, metrics)

    out = []
    prev = H(0)
    for k in range(min(steps, len(sched) - 1)):
        if (t - sched.tau[k + 1]) < min_window_samples * dt:
            break
        nxt = H(k + 1)
        denom = A * bracket ** nu * eta ** (k * nu) * prev ** nu
        out.append(nxt / denom if denom > 0 else 0.0)
        prev = nxt
    return out


def check_sup_bound(witnesses, p0: float, stability: float = 2.0, report_only: bool = False,
                    recursion_steps: int = 3) -> VerificationReport:
    """Sup bound with a fitted constant, checked for stability across a family.

    ``witnesses`` is one witness or a dyadic resolution family of the same
    problem.  Passes iff ``max C* / min C* <= stability`` and the fitted H
    recursion constants vary by at most ``stability`` across the family.
    """
    if isinstance(witnesses, HeatFlowWitness):
        witnesses = [witnesses]
    fitted, recursions = [], []
    for w in witnesses:
        c, _ = sup_bound_constant(w, p0)
        fitted.append(float(c))
        recursions.append(h_recursion_constants(w, p0, recursion_steps))
    spread = _ratio_spread(fitted)
    nsteps = min(len(r) for r in recursions)
    rec_spread = [_ratio_spread([r[k] for r in recursions]) for k in range(nsteps)]
    lhs = [spread] + rec_spread
    rhs = [stability] * len(lhs)
    if all(c == 0.0 for c in fitted):
        lhs, rhs = [0.0], [0.0]
    return VerificationReport(
        "sup_bound", digest(*[w.f[-1] for w in witnesses], p0), lhs, rhs, 0.0,
        fitted={"C_star": fitted, "recursion_constants": recursions},
        details={"p0": p0, "resolutions": [list(w.grid.extents) for w in witnesses],
                 "A": [w.A for w in witnesses], "mu": [w.mu for w in witnesses]},
        report_only=report_only)


def witness_from_trajectory(traj: FlowTrajectory, phi: CutoffFunction, c0: float = 1.0,
                            A: float = 1.0) -> HeatFlowWitness:
    """Witness with ``f = |Rm|`` and ``u = c0 |Rm|`` from stored snapshots."""
    if not traj.snapshots:
        raise ValueError("trajectory has no snapshots (run with keep_snapshots=True)")
    from .curvature import riemann

    f = []
    for g in traj.snapshots:
        f.append(np.sqrt(np.maximum(norm_squared_array(riemann(g), g), 0.0)))
    u = [c0 * v for v in f]
    times = np.asarray(traj.times[: len(f)], dtype=float)
    mu = fit_mu(u, phi, times, list(traj.snapshots))
    return HeatFlowWitness(times, f, u, phi, list(traj.snapshots), 0.0, 0.0, 0.0, mu, A)


def smallness_thresholds(A: float, c0: float) -> dict:
    """The two L2 smallness thresholds appearing for the curvature smoothing
    argument; the stricter one gates witness admissibility."""
    return {"strict": 1.0 / (5.0 * math.e * c0 * A), "loose": 1.0 / (4.0 * c0 * A)}


# --------------------------------------------------------------------------
# smoothing bound and flow conditions
# --------------------------------------------------------------------------


def smoothing_quotient(times, sup_phi2_rm, sup_grad: float, c_s: float) -> np.ndarray:
    t = np.asarray(times, dtype=float)
    s = np.asarray(sup_phi2_rm, dtype=float)
    return s * t / (c_s * (t * sup_grad ** 2 + 1.0))


def check_smoothing_bound(traj, phi, c_s: float, min_samples: int = 10) -> VerificationReport:
    """Boundedness shape check of ``q(t) = ||phi^2 Rm||_inf t / (C_s (t |grad phi|^2 + 1))``.

    Passes iff ``sup q <= 10 median q`` and the mean of the last quarter of
    the samples is at most twice the mean of the first quarter.
    ``traj`` is a FlowTrajectory or a ``(times, sup_phi2_rm)`` pair.
    """
    if isinstance(traj, FlowTrajectory):
        times, sup = traj.times, traj.sup_phi2_rm
    else:
        times, sup = traj
    times = np.asarray(times, dtype=float)
    sup = np.asarray(sup, dtype=float)
    if times.size == 0:
        raise ValueError("empty trajectory")
    keep = times > 0
    if int(keep.sum()) < min_samples:
        raise ValueError(f"need at least {min_samples} samples with t > 0, got {int(keep.sum())}")
    if not c_s > 0:
        raise ValueError("C_s must be positive")
    sup_grad = phi.sup_grad if isinstance(phi, CutoffFunction) else float(phi)
    q = smoothing_quotient(times[keep], sup[keep], sup_grad, c_s)
    k = max(1, q.size // 4)
    first, last = float(np.mean(q[:k])), float(np.mean(q[-k:]))
    med = float(np.median(q))
    return VerificationReport(
        "smoothing_bound", digest(times, sup, sup_grad, c_s),
        [float(np.max(q)), last], [10.0 * med, 2.0 * first], 0.0,
        fitted={"C_star": float(np.max(q)), "median_q": med},
        details={"q": q, "times": times[keep], "first_quartile_mean": first,
                 "last_quartile_mean": last, "C_s": c_s, "sup_grad_phi": sup_grad})


def check_flow_conditions(traj: FlowTrajectory, g0: MetricField | None = None,
                          config: FlowConfig = FlowConfig()) -> VerificationReport:
    """Metric equivalence, L2 curvature growth and Sobolev drift at every sample.

    The L2 condition uses ``e * initial``; the looser ``2e * initial`` is
    reported alongside.  Sobolev drift is only judged where it was tracked.
    """
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    lo, hi = config.equivalence_bounds
    l0 = traj.l2_rm_supp[0]
    l2_ratio = max(traj.l2_rm_supp) / l0 if l0 > 0 else (0.0 if max(traj.l2_rm_supp) <= ZERO_FLOOR else math.inf)
    a = np.asarray(traj.sobolev_a, dtype=float)
    tracked = bool(np.all(np.isfinite(a))) and a.size > 0 and a[0] > 0
    drift = float(np.max(a / a[0])) if tracked else 0.0
    lhs = [lo, max(traj.eig_max_ratio), l2_ratio, drift]
    rhs = [min(traj.eig_min_ratio), hi, math.e, config.sobolev_drift_limit]
    failures = dict(traj.conditions) if traj.conditions else {}
    return VerificationReport(
        "flow_conditions", digest(np.asarray(traj.times), np.asarray(traj.l2_rm_supp),
                                  g0 if g0 is not None else 0), lhs, rhs, 0.0,
        fitted={"l2_growth": l2_ratio, "sobolev_drift": drift if tracked else None},
        details={"conditions": ["metric_equivalence_lower", "metric_equivalence_upper",
                                "l2_curvature", "sobolev_drift"],
                 "l2_within_2e": l2_ratio <= 2.0 * math.e, "sobolev_tracked": tracked,
                 "first_failure_times": failures, "failure": traj.failure,
                 "window": [traj.times[0], traj.times[-1]]})


# --------------------------------------------------------------------------
# elliptic L4 lemmas
# --------------------------------------------------------------------------


def _pointwise_norms2(g: MetricField, pack):
    ric2 = norm_squared_array(pack.ricci, g)
    rm2 = norm_squared_array(pack.riemann, g)
    b2 = norm_squared_array(pack.bach, g) if pack.bach is not None else np.zeros(g.grid.shape)
    return np.maximum(ric2, 0.0), np.maximum(rm2, 0.0), np.maximum(b2, 0.0)


def elliptic_sides(g: MetricField, r: float, center, pack=None, dist=None) -> dict:
    """Both sides (constant 1) of the two L4 lemmas on balls around ``center``.

    Lemma A: ``(int_{B(r/2)} |Ric|^4)^(1/2)`` vs ``r^-2 int_{B(r)} |Ric|^2 +
    (int |Ric|^2)^(1/2) (int |B|^2)^(1/2)``.  Lemma B: ``(int_{B(r/4)} |Rm|^4)^(1/2)``
    vs ``(int |Ric|^2)^(1/2) (int |B|^2)^(1/2) + r^-2 int_{B(r)} |Rm|^2``.
    """
    grid = g.grid
    if g.dimension != 4:
        raise GridError("the L4 lemmas are four-dimensional")
    node = grid.nearest_node(center)
    cell = max(grid.spacing) * math.sqrt(float(np.max(g.eigenvalues)))
    if r / 4.0 < cell:
        raise GridError(f"ball B(r/4) with r={r:g} is under-resolved (one cell is {cell:.3g})")
    if pack is None:
        pack = curvature_pack(g, with_bach=True)
    if dist is None:
        dist = geodesic_distance(g, node, max_distance=r + 3.0 * cell)
    ric2, rm2, b2 = _pointwise_norms2(g, pack)
    w1, w2, w4 = (ball_weights(dist, r), ball_weights(dist, r / 2.0), ball_weights(dist, r / 4.0))
    if grid.periodic:
        if r >= 0.5 * min(grid.lengths) * math.sqrt(g.min_eigenvalue):
            raise GridError("ball wraps around the periodic chart")
    elif np.any((w1 > 0) & ~grid.interior_mask(COLLAR)):
        raise GridError("ball touches the boundary collar")
    I = lambda v, w: integrate_array(grid, v * w, g)
    ric_l2 = I(ric2, w1)
    rm_l2 = I(rm2, w1)
    b_l2 = I(b2, w1)
    mixed = math.sqrt(max(ric_l2, 0.0) * max(b_l2, 0.0))
    return {
        "lemma_ric": (math.sqrt(max(I(ric2 ** 2, w2), 0.0)), ric_l2 / r ** 2 + mixed),
        "lemma_rm": (math.sqrt(max(I(rm2 ** 2, w4), 0.0)), mixed + rm_l2 / r ** 2),
        "rm_l2_ball": math.sqrt(max(rm_l2, 0.0)),
        "bach_l2_ball": math.sqrt(max(b_l2, 0.0)),
    }


def _fitted(lhs: float, rhs: float) -> float:
    if rhs <= ZERO_FLOOR:
        if lhs <= ZERO_FLOOR:
            return 0.0
        raise ValueError("L4 lemma right side vanishes while the left side does not")
    return lhs / rhs


def check_elliptic_l4(metrics, r: float, center, stability: float = 2.0,
                      packs=None) -> VerificationReport:
    """Fitted constants of both L4 lemmas and their stability.

    ``metrics`` is one MetricField or a dyadic refinement family of the same
    metric (coarse to fine); ``center`` is a chart point.  Passes iff, for
    each lemma, the fitted C* varies by at most ``stability`` across the
    family and between radii ``r`` and ``r/2`` on the finest metric.
    """
    if isinstance(metrics, MetricField):
        metrics = [metrics]
    packs = list(packs) if packs is not None else [None] * len(metrics)
    per_level = []
    for g, pk in zip(metrics, packs):
        if pk is None:
            pk = curvature_pack(g, with_bach=True)
        per_level.append((g, pk, elliptic_sides(g, r, center, pk)))
    g_fine, pack_fine, _ = per_level[-1]
    half = elliptic_sides(g_fine, r / 2.0, center, pack_fine)
    fitted = {}
    lhs = []
    for name in ("lemma_ric", "lemma_rm"):
        levels = [_fitted(*s[name]) for _, _, s in per_level]
        halved = _fitted(*half[name])
        fitted[name] = {"refinement": levels, "radius_half": halved}
        lhs.append(_ratio_spread(levels))
        lhs.append(_ratio_spread([levels[-1], halved]))
    return VerificationReport(
        "elliptic_l4", digest(*[g for g in metrics], r, list(map(float, center))), lhs,
        [stability] * len(lhs), 0.0, fitted=fitted,
        details={"sides": {f"level{i}": s for i, (_, _, s) in enumerate(per_level)},
                 "sides_radius_half": half, "radius": r,
                 "rm_l2_ball": per_level[-1][2]["rm_l2_ball"]})


def elliptic_scaling_covariance(g: MetricField, r: float, center, lam: float = 2.0,
                                tolerance: float = 0.05) -> VerificationReport:
    """Fitted constants on ``g`` vs ``lam^2 g`` with radius ``lam r``; passes iff
    each relative change is at most ``tolerance``."""
    base = elliptic_sides(g, r, center)
    scaled = elliptic_sides(g.scaled(lam * lam), lam * r, center)
    lhs, fitted = [], {}
    for name in ("lemma_ric", "lemma_rm"):
        c0, c1 = _fitted(*base[name]), _fitted(*scaled[name])
        rel = abs(c1 - c0) / c0 if c0 > 0 else abs(c1)
        fitted[name] = [c0, c1]
        lhs.append(rel)
    return VerificationReport("elliptic_scaling", digest(g, r, lam), lhs, [tolerance] * 2, 0.0,
                              fitted=fitted, details={"lambda": lam, "radius": r})


# --------------------------------------------------------------------------
# volume growth pipeline
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TheoremConfig:
    """Settings of the end-to-end volume-growth report."""

    epsilon0: float = 50.0
    c_budget: float = 10.0
    radii_fractions: tuple = (0.5, 0.75, 1.0)
    volume_cells_per_radius: int = 12
    flow: FlowConfig = FlowConfig(T_target=1.0, cfl=0.1, record_stride=8)
    sobolev_budget: int = 8
    profile: str = "cos2"


def _volume_rows(g: MetricField, center, r: float, radii, cells: int):
    h = r / cells
    box = local_box(g.grid, center, r + (COLLAR + 3) * h * math.sqrt(float(np.max(g.eigenvalues))), h)
    local = resample_metric(g, box)
    mid = tuple((n - 1) // 2 for n in box.extents)
    rows, worst = volume_growth_table(local, mid, radii)
    return [[row.r, row.volume, row.ratio] for row in rows], worst


def theorem_one_report(g: MetricField, center, r: float, c_s: float | None = None,
                       config: TheoremConfig = TheoremConfig(),
                       trajectory: FlowTrajectory | None = None) -> VerificationReport:
    """Hypothesis gate, smoothing flow, flow checks and volume growth.

    ``center`` is a chart point.  The curvature hypothesis is judged on the
    geodesic ball ``B(center, 2r)``; the flow uses a cutoff on the
    coordinate ball of radius ``2r``.  A precomputed ``trajectory`` of the
    same flow may be supplied.  Passes iff the hypothesis holds, both flow
    checks pass and ``max Vol/r^4 <= c_budget`` under ``g`` and the final
    flowed metric.
    """
    grid = g.grid
    node = grid.nearest_node(center)
    point = tuple(float(c) for c in grid.node_coordinates(node))
    pack = curvature_pack(g, with_bach=g.dimension == 4)
    cell = max(grid.spacing) * math.sqrt(float(np.max(g.eigenvalues)))
    dist = geodesic_distance(g, node, max_distance=2.0 * r + 3.0 * cell)
    w = ball_weights(dist, 2.0 * r)
    rm_l2 = math.sqrt(max(integrate_array(grid, np.maximum(norm_squared_array(pack.riemann, g), 0.0) * w, g), 0.0))
    b_l2 = (math.sqrt(max(integrate_array(grid, np.maximum(norm_squared_array(pack.bach, g), 0.0) * w, g), 0.0))
            if pack.bach is not None else 0.0)
    details = {"rm_l2_ball_2r": rm_l2, "bach_l2_ball_2r": b_l2, "epsilon0": config.epsilon0,
               "center": point, "r": r}
    inputs = digest(g, point, r)
    if rm_l2 > config.epsilon0:
        return VerificationReport("theorem_one", inputs, rm_l2, config.epsilon0, 0.0,
                                  details=details, hypothesis_met=False)
    phi = make_cutoff(grid, point, 2.0 * r, config.profile, metric=g)
    if c_s is None:
        est = estimate_sobolev(g, phi, budget=config.sobolev_budget, refinements=2)
        c_s = est.usable
        details["sobolev_estimate"] = est.constant
    details["thresholds"] = smallness_thresholds(c_s, 1.0)
    if trajectory is None:
        trajectory = run_flow(g, phi, config.flow)
    smooth = check_smoothing_bound(trajectory, phi, c_s)
    cond = check_flow_conditions(trajectory, g, config.flow)
    radii = [f * r for f in config.radii_fractions]
    rows0, worst0 = _volume_rows(g, point, r, radii, config.volume_cells_per_radius)
    g_star = trajectory.final_state.g
    rows1, worst1 = _volume_rows(g_star, point, r, radii, config.volume_cells_per_radius)
    details.update({"volume_table_g": rows0, "volume_table_flowed": rows1,
                    "t_star": trajectory.final_state.t, "C_s": c_s,
                    "smoothing_bound": smooth.to_dict(), "flow_conditions": cond.to_dict()})
    worst = max(worst0, worst1)
    lhs = [worst, 0.0 if smooth.verdict == PASS else 1.0, 0.0 if cond.verdict == PASS else 1.0]
    rhs = [config.c_budget, 0.0, 0.0]
    return VerificationReport("theorem_one", inputs, lhs, rhs, 0.0,
                              fitted={"C_volume": worst, "C_volume_g": worst0, "C_volume_flowed": worst1},
                              details=details)


# --------------------------------------------------------------------------
# suites
# --------------------------------------------------------------------------


def summary_rows(reports: Sequence[VerificationReport]):
    """``(check, verdict, report_only, inputs_digest)`` sorted by check name."""
    return [(r.check, r.verdict, r.report_only, r.inputs_digest)
            for r in sorted(reports, key=lambda r: r.check)]


def suite_passed(reports: Sequence[VerificationReport]) -> bool:
    return all(r.verdict != FAIL for r in reports if not r.report_only)
