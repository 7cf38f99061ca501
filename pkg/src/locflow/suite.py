"""Verification suites: named flows plus a list of checks, run task-parallel.

A suite file looks like::

    {"name": "acceptance",
     "flows": {"s4": {"scenario": {...}, "cutoff": {...}, "flow": {...}}},
     "checks": [{"name": "s4_smoothing", "kind": "smoothing_bound", "flow": "s4"}, ...]}

Flows are computed once and shared by the checks that reference them.
Reports are merged by check name, so outputs do not depend on the number
of worker threads.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import verify as V
from .config import (CUTOFF_SCHEMA, FLOW_SCHEMA, POINT, POSITIVE, SCENARIO_SCHEMA, ConfigError,
                     load_json, validate)
from .cutoff import CutoffFunction, estimate_sobolev, make_cutoff, moser_schedule
from .flow import FlowConfig, FlowTrajectory, run_flow
from .geometry import volume_growth_table
from .grid import ChartGrid, MetricField
from .scenarios import Scenario, build_scenario, default_grid

logger = logging.getLogger(__name__)

SOBOLEV_BUDGET = 8

_NAME = {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"}
_INT_LIST = {"type": "array", "items": {"type": "integer", "minimum": 8}, "minItems": 1}

CHECK_SCHEMAS = {
    "ibp_corpus": {"n": {"type": "integer", "minimum": 8}, "count": {"type": "integer", "minimum": 1},
                   "seed": {"type": "integer"}, "safety": POSITIVE},
    "ibp_negative_controls": {"n": {"type": "integer", "minimum": 8}},
    "moser_schedule": {"p0": POSITIVE, "t": POSITIVE, "nu": POSITIVE, "tolerance": POSITIVE,
                       "expected": {"type": "array", "items": {
                           "type": "object", "required": ["k"], "additionalProperties": False,
                           "properties": {"k": {"type": "integer", "minimum": 0},
                                          "p": {"type": "number"}, "p_prime": {"type": "number"}}}}},
    "sup_bound": {"extents": _INT_LIST, "p0": POSITIVE, "T": POSITIVE,
                  "samples": {"type": "integer", "minimum": 3}, "seed": {"type": "integer"},
                  "stability": POSITIVE, "witness_tolerance": POSITIVE},
    "sup_bound_flow": {"flow": _NAME, "p0": POSITIVE, "c0": POSITIVE},
    "smoothing_bound": {"flow": _NAME, "c_s": POSITIVE},
    "flow_conditions": {"flow": _NAME},
    "flow_locality": {"flow": _NAME},
    "elliptic_l4": {"scenario": SCENARIO_SCHEMA, "extents": _INT_LIST, "radius": POSITIVE,
                    "center": POINT, "center_fraction": POINT, "stability": POSITIVE},
    "elliptic_scaling": {"scenario": SCENARIO_SCHEMA, "radius": POSITIVE, "center": POINT,
                         "center_fraction": POINT, "lambda": POSITIVE, "tolerance": POSITIVE},
    "volume_growth": {"scenario": SCENARIO_SCHEMA, "center": POINT, "center_fraction": POINT,
                      "radii": {"type": "array", "items": POSITIVE, "minItems": 1},
                      "unit_radius_tolerance": POSITIVE, "constancy_tolerance": POSITIVE},
    "theorem_one": {"flow": _NAME, "epsilon0": POSITIVE, "c_budget": POSITIVE,
                    "radii_fractions": {"type": "array", "items": POSITIVE, "minItems": 1},
                    "volume_cells_per_radius": {"type": "integer", "minimum": 4}},
}
REQUIRED = {
    "sup_bound_flow": ["flow"], "smoothing_bound": ["flow"], "flow_conditions": ["flow"],
    "flow_locality": ["flow"], "theorem_one": ["flow"],
    "elliptic_l4": ["scenario", "extents", "radius"], "elliptic_scaling": ["scenario", "radius"],
    "volume_growth": ["scenario", "radii"],
}

SUITE_SCHEMA = {
    "type": "object",
    "properties": {
        "name": _NAME,
        "description": {"type": "string"},
        "flows": {"type": "object", "additionalProperties": {
            "type": "object",
            "properties": {"scenario": SCENARIO_SCHEMA, "cutoff": CUTOFF_SCHEMA, "flow": FLOW_SCHEMA},
            "required": ["scenario", "cutoff"],
            "additionalProperties": False,
        }},
        "checks": {"type": "array", "minItems": 1, "items": {
            "type": "object",
            "properties": {"name": _NAME, "kind": {"enum": sorted(CHECK_SCHEMAS)}},
            "required": ["name", "kind"],
        }},
    },
    "required": ["name", "checks"],
    "additionalProperties": False,
}


def validate_suite(suite: dict) -> None:
    validate(suite, SUITE_SCHEMA, "suite")
    names = [c["name"] for c in suite["checks"]]
    if len(set(names)) != len(names):
        raise ConfigError("check names must be unique")
    flows = suite.get("flows", {})
    for check in suite["checks"]:
        kind = check["kind"]
        schema = {"type": "object",
                  "properties": {"name": _NAME, "kind": {"const": kind}, **CHECK_SCHEMAS[kind]},
                  "required": ["name", "kind"] + REQUIRED.get(kind, []),
                  "additionalProperties": False}
        validate(check, schema, f"check {check['name']!r}")
        if "flow" in check and check["flow"] not in flows:
            raise ConfigError(f"check {check['name']!r} refers to unknown flow {check['flow']!r}")


def load_suite(path) -> dict:
    """Read a suite file; the bare name ``acceptance`` selects the bundled suite."""
    if str(path) == "acceptance":
        data = load_json(resources.files("locflow") / "suites" / "acceptance.json")
    else:
        data = load_json(path)
    validate_suite(data)
    return data


# --------------------------------------------------------------------------
# building inputs
# --------------------------------------------------------------------------


def scenario_from_spec(spec: dict) -> Scenario:
    name = spec["name"]
    gs = dict(spec.get("grid", {}))
    dim = gs.get("dimension", 2 if name in ("polar_flat",) else 4)
    n = gs.get("n", 16)
    if "lower" in gs or "upper" in gs:
        grid = ChartGrid.box(dim, n, gs.get("lower", 0.0), gs.get("upper", 1.0),
                             gs.get("boundary", "frozen"))
    else:
        grid = default_grid(name, dim, n)
    return build_scenario(name, spec.get("params", {}), grid)


def resolve_point(grid: ChartGrid, spec: dict) -> tuple:
    """``center`` as given, or ``center_fraction`` of the chart (default middle)."""
    if "center" in spec:
        point = tuple(float(c) for c in spec["center"])
    else:
        frac = spec.get("center_fraction", [0.5] * grid.dimension)
        point = tuple(o + f * L for o, f, L in zip(grid.origin, frac, grid.lengths))
    if len(point) != grid.dimension:
        raise ConfigError(f"center {point} does not match the chart dimension {grid.dimension}")
    return point


def resolve_radius(grid: ChartGrid, spec: dict) -> float:
    if "radius" in spec:
        return float(spec["radius"])
    return float(spec["radius_fraction"]) * min(grid.lengths)


def flow_config_from_spec(spec: dict | None) -> FlowConfig:
    known = {f.name for f in fields(FlowConfig)}
    return FlowConfig(**{k: v for k, v in (spec or {}).items() if k in known})


@dataclass
class FlowResult:
    """A computed flow shared by the checks of a suite."""

    g0: MetricField
    phi: CutoffFunction
    center: tuple
    radius: float
    config: FlowConfig
    trajectory: FlowTrajectory
    sobolev: float = field(default=math.nan)

    @property
    def c_s(self) -> float:
        if not math.isfinite(self.sobolev):
            self.sobolev = estimate_sobolev(self.g0, self.phi, budget=SOBOLEV_BUDGET, refinements=2).usable
        return self.sobolev


def compute_flow(spec: dict) -> FlowResult:
    scen = scenario_from_spec(spec["scenario"])
    g0 = scen.metric
    cut = spec["cutoff"]
    center = resolve_point(g0.grid, cut)
    radius = resolve_radius(g0.grid, cut)
    phi = make_cutoff(g0.grid, center, radius, cut.get("profile", "cos2"), metric=g0)
    config = flow_config_from_spec(spec.get("flow"))
    traj = run_flow(g0, phi, config)
    return FlowResult(g0, phi, center, radius, config, traj)


# --------------------------------------------------------------------------
# checks
# --------------------------------------------------------------------------


def _aggregate(name: str, reports, lhs, rhs, tol, **extra) -> V.VerificationReport:
    return V.VerificationReport(name, V.digest(*[r.inputs_digest for r in reports]), lhs, rhs, tol, **extra)


def _ibp_corpus(c, flows):
    n = c.get("n", 64)
    grid = ChartGrid((n, n), (2.0 * math.pi / n,) * 2)
    c_disc = V.calibrate_ibp_margin(grid, c.get("safety", 10.0))
    reps = [V.check_ibp_lemma(f, psi, p, grid=grid, c_disc=c_disc)
            for f, psi, p in V.ibp_corpus(grid, c.get("count", 200), c.get("seed", 20240601))]
    slack = [(r.rhs + r.tolerance - r.lhs) / max(abs(r.rhs), V.ZERO_FLOOR) for r in reps]
    return _aggregate("ibp_corpus", reps, [r.lhs for r in reps], [r.rhs for r in reps],
                      [r.tolerance for r in reps],
                      fitted={"c_disc": c_disc, "min_relative_slack": min(slack)},
                      details={"p": [r.details["p"] for r in reps], "passed": sum(r.passed for r in reps)})


def _ibp_negative_controls(c, flows):
    n = c.get("n", 64)
    grid = ChartGrid((n, n), (2.0 * math.pi / n,) * 2)
    c_disc = V.calibrate_ibp_margin(grid)
    reps = [V.check_ibp_lemma(f, psi, p, grid=grid, c_disc=c_disc, coefficients=co)
            for f, psi, p, co in V.ibp_negative_controls(grid)]
    # each control must violate its tampered inequality: RHS + margin < LHS
    return _aggregate("ibp_negative_controls", reps, [r.rhs + r.tolerance for r in reps],
                      [r.lhs for r in reps], 0.0,
                      details={"control_verdicts": [r.verdict for r in reps]})


def _moser_schedule(c, flows):
    sched = moser_schedule(c.get("p0", 3.0), c.get("t", 1.0), c.get("nu", 1.5))
    lhs, rows = [], []
    for e in c.get("expected", []):
        k = e["k"]
        for key, arr in (("p", sched.p), ("p_prime", sched.p_prime)):
            if key in e:
                lhs.append(abs(float(arr[k]) - e[key]))
                rows.append([k, key, float(arr[k]), e[key]])
    tol = c.get("tolerance", 1e-12)
    return V.VerificationReport("moser_schedule", V.digest(sched.p, sched.p_prime, sched.tau),
                                lhs or [0.0], [0.0] * max(len(lhs), 1), tol,
                                details={"compared": rows, "p": sched.p[:6], "p_prime": sched.p_prime[:6],
                                         "tau": sched.tau[:6], "steps": len(sched)})


def _sup_bound(c, flows):
    ws = V.heat_witness_family(tuple(c.get("extents", (32, 64, 128))), T=c.get("T", 0.5),
                               samples=c.get("samples", 1001), seed=c.get("seed", 3))
    residuals = [w.validate(c.get("witness_tolerance", 1e-2)) for w in ws]
    rep = V.check_sup_bound(ws, c.get("p0", 3.0), c.get("stability", 2.0))
    rep.details["witness_residuals"] = residuals
    return rep


def _sup_bound_flow(c, flows):
    fr = flows[c["flow"]]
    c0 = c.get("c0", 1.0)
    A = estimate_sobolev(fr.g0, fr.phi, budget=SOBOLEV_BUDGET, refinements=2).constant
    w = V.witness_from_trajectory(fr.trajectory, fr.phi, c0, A)
    rep = V.check_sup_bound(w, c.get("p0", 3.0), report_only=True)
    u0 = V.integrate_array(w.grid, fr.phi.phi.values ** 2 * w.u[0] ** 2, fr.g0)
    thresholds = V.smallness_thresholds(A, c0)
    rep.details.update(thresholds=thresholds, u_l2_squared_initial=u0,
                       admissible_strict=u0 <= thresholds["strict"])
    return rep


def _smoothing_bound(c, flows):
    fr = flows[c["flow"]]
    return V.check_smoothing_bound(fr.trajectory, fr.phi, c.get("c_s", fr.c_s))


def _flow_conditions(c, flows):
    fr = flows[c["flow"]]
    return V.check_flow_conditions(fr.trajectory, fr.g0, fr.config)


def _flow_locality(c, flows):
    fr = flows[c["flow"]]
    outside = ~fr.phi.support
    diff = np.abs(fr.trajectory.final_state.g.components - fr.g0.components)[outside]
    # no nodes outside the support would make the check vacuous
    worst = float(np.max(diff)) if diff.size else math.inf
    return V.VerificationReport("flow_locality", V.digest(fr.g0, fr.trajectory.final_state.g),
                                [worst], [0.0], 0.0,
                                details={"nodes_outside_support": int(outside.sum()),
                                         "t_final": fr.trajectory.final_state.t})


def _metric_family(spec: dict, extents) -> list:
    out = []
    for n in extents:
        s = dict(spec)
        s["grid"] = {**spec.get("grid", {}), "n": n}
        out.append(scenario_from_spec(s).metric)
    return out


def _elliptic_l4(c, flows):
    metrics = _metric_family(c["scenario"], c["extents"])
    center = resolve_point(metrics[0].grid, c)
    return V.check_elliptic_l4(metrics, c["radius"], center, c.get("stability", 2.0))


def _elliptic_scaling(c, flows):
    g = scenario_from_spec(c["scenario"]).metric
    return V.elliptic_scaling_covariance(g, c["radius"], resolve_point(g.grid, c), c.get("lambda", 2.0),
                                         c.get("tolerance", 0.05))


def unit_ball_volume(n: int) -> float:
    return math.pi ** (0.5 * n) / math.gamma(0.5 * n + 1.0)


def _volume_growth(c, flows):
    g = scenario_from_spec(c["scenario"]).metric
    node = g.grid.nearest_node(resolve_point(g.grid, c))
    radii = [float(r) for r in c["radii"]]
    rows, worst = volume_growth_table(g, node, radii)
    ref = unit_ball_volume(g.dimension)
    ratios = [row.ratio for row in rows]
    unit = [row.ratio for row in rows if abs(row.r - 1.0) < 1e-12]
    lhs = [abs(unit[0] / ref - 1.0)] if unit else []
    rhs = [c.get("unit_radius_tolerance", 0.05)] if unit else []
    lhs.append(max(ratios) / min(ratios) - 1.0)
    rhs.append(c.get("constancy_tolerance", 0.06))
    return V.VerificationReport("volume_growth", V.digest(g, list(node), radii), lhs, rhs, 0.0,
                                fitted={"C_volume": worst},
                                details={"rows": [[row.r, row.volume, row.ratio] for row in rows],
                                         "euclidean_ratio": ref})


def _theorem_one(c, flows):
    fr = flows[c["flow"]]
    defaults = V.TheoremConfig()
    cfg = V.TheoremConfig(epsilon0=c.get("epsilon0", defaults.epsilon0),
                          c_budget=c.get("c_budget", defaults.c_budget),
                          radii_fractions=tuple(c.get("radii_fractions", defaults.radii_fractions)),
                          volume_cells_per_radius=c.get("volume_cells_per_radius",
                                                        defaults.volume_cells_per_radius),
                          flow=fr.config, profile=fr.phi.profile)
    return V.theorem_one_report(fr.g0, fr.center, 0.5 * fr.radius, fr.c_s, cfg, trajectory=fr.trajectory)


CHECKS = {
    "ibp_corpus": _ibp_corpus,
    "ibp_negative_controls": _ibp_negative_controls,
    "moser_schedule": _moser_schedule,
    "sup_bound": _sup_bound,
    "sup_bound_flow": _sup_bound_flow,
    "smoothing_bound": _smoothing_bound,
    "flow_conditions": _flow_conditions,
    "flow_locality": _flow_locality,
    "elliptic_l4": _elliptic_l4,
    "elliptic_scaling": _elliptic_scaling,
    "volume_growth": _volume_growth,
    "theorem_one": _theorem_one,
}


def run_check(check: dict, flows: dict) -> V.VerificationReport:
    start = time.perf_counter()
    rep = CHECKS[check["kind"]](check, flows)
    rep.check = check["name"]
    rep.details["kind"] = check["kind"]
    logger.info("check %s: %s (%.1f s)", check["name"], rep.verdict, time.perf_counter() - start)
    return rep


# --------------------------------------------------------------------------
# running and writing
# --------------------------------------------------------------------------


def write_trajectory_csv(traj: FlowTrajectory, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FlowTrajectory.COLUMNS)
        for row in traj.rows():
            w.writerow([repr(float(v)) for v in row])


def write_reports(reports, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rep in reports:
        (out / f"{rep.check}.json").write_text(rep.to_json() + "\n")
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["check", "kind", "verdict", "report_only", "inputs_digest"])
        for rep in sorted(reports, key=lambda r: r.check):
            w.writerow([rep.check, rep.details.get("kind", rep.check), rep.verdict,
                        int(rep.report_only), rep.inputs_digest])
    return out


def run_suite(suite: dict, out_dir=None, threads: int = 1, only=None):
    """Run every check (or the names in ``only``) and return reports sorted
    by check name; writes per-check JSON, ``summary.csv`` and flow CSVs to
    ``out_dir`` when given."""
    validate_suite(suite)
    checks = [c for c in suite["checks"] if only is None or c["name"] in only]
    needed = sorted({c["flow"] for c in checks if "flow" in c})
    threads = max(1, int(threads))
    with ThreadPoolExecutor(max_workers=threads) as pool:
        start = time.perf_counter()
        results = list(pool.map(lambda name: compute_flow(suite["flows"][name]), needed))
        flows = dict(zip(needed, results))
        if needed:
            logger.info("flows %s computed in %.1f s", needed, time.perf_counter() - start)
        for fr in flows.values():
            fr.c_s  # estimate once, before the checks share it
        reports = list(pool.map(lambda c: run_check(c, flows), checks))
    reports.sort(key=lambda r: r.check)
    if out_dir is not None:
        out = write_reports(reports, out_dir)
        if flows:
            (out / "flows").mkdir(exist_ok=True)
            for name, fr in flows.items():
                write_trajectory_csv(fr.trajectory, out / "flows" / f"{name}.csv")
    return reports
