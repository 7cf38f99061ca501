"""Command-line interface: ``locflow <subcommand> ...``.

Exit codes: 0 success, 1 check failure, 2 usage or configuration error,
3 numerical step failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import verify as V
from .config import RUN_CONFIG_SCHEMA, ConfigError, load_run_config, validate
from .curvature import curvature_pack
from .cutoff import PROFILES, estimate_sobolev, make_cutoff
from .fieldio import FieldFormatError, read_field, write_field
from .flow import StepFailure, run_flow
from .geometry import volume_growth_table
from .grid import MetricField, ScalarField, integrate_array, norm_squared_array
from .scenarios import SCENARIOS
from .suite import (flow_config_from_spec, load_suite, resolve_point, resolve_radius, run_suite,
                    scenario_from_spec, write_trajectory_csv)

logger = logging.getLogger("locflow")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _param(text: str):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(V._jsonable(data), indent=2, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_metric(path) -> MetricField:
    field = read_field(path)
    if not isinstance(field, MetricField):
        raise FieldFormatError(f"{path} holds a {type(field).__name__}, not a metric")
    return field


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_scenario(args) -> int:
    params = dict(args.param or [])
    if args.name == "perturbed_flat" and "seed" not in params and args.seed is not None:
        params["seed"] = args.seed
    grid = {"dimension": args.dim}
    if args.n is not None:
        grid["n"] = args.n
    if args.lower is not None or args.upper is not None:
        grid.update(lower=args.lower if args.lower is not None else 0.0,
                    upper=args.upper if args.upper is not None else 1.0,
                    boundary=args.boundary or "frozen")
    scen = scenario_from_spec({"name": args.name, "params": params, "grid": grid})
    out = _out_dir(args)
    write_field(scen.metric, out / "metric.json")
    oracle = {}
    for key, ov in sorted(scen.oracle.items()):
        entry = {"basis": ov.basis, "description": ov.description}
        if isinstance(ov.value, (int, float)):
            entry["value"] = ov.value
        oracle[key] = entry
    g = scen.grid
    _write_json(out / "manifest.json", {
        "scenario": scen.name, "params": params, "dimension": g.dimension, "extents": g.extents,
        "spacing": g.spacing, "origin": g.origin, "boundary": g.boundary,
        "metric_file": "metric.json", "oracle": oracle, "locflow_version": __version__,
    })
    return EXIT_OK


def cmd_curvature(args) -> int:
    g = _load_metric(args.metric)
    pack = curvature_pack(g, with_bach=g.dimension == 4 and not args.no_bach)
    out = _out_dir(args)
    grid = g.grid
    mask = grid.interior_mask() if not grid.periodic else np.ones(grid.shape, dtype=bool)
    summary = {}
    for name in ("riemann", "ricci", "weyl", "bach", "bach_self_dual"):
        t = getattr(pack, name, None)
        if t is None:
            continue
        n2 = np.maximum(norm_squared_array(t, g), 0.0)
        summary[name] = {"sup_norm": float(np.sqrt(n2[mask].max())),
                         "l2_norm": float(np.sqrt(integrate_array(grid, np.where(mask, n2, 0.0), g)))}
        if name == "riemann":
            write_field(ScalarField(grid, np.sqrt(n2)), out / "riemann_norm.json")
    scalar = pack.scalar.values
    summary["scalar"] = {"min": float(scalar[mask].min()), "max": float(scalar[mask].max())}
    write_field(pack.scalar, out / "scalar_curvature.json")
    _write_json(out / "curvature.json", {"metric": str(args.metric), "summary": summary,
                                          "frozen_collar_excluded": not grid.periodic})
    return EXIT_OK


def cmd_sobolev(args) -> int:
    g = _load_metric(args.metric)
    spec = {"radius": args.radius}
    if args.center is not None:
        spec["center"] = args.center
    center = resolve_point(g.grid, spec)
    phi = make_cutoff(g.grid, center, args.radius, metric=g)
    est = estimate_sobolev(g, phi, budget=args.budget, seed=args.seed or 0)
    _write_json(_out_dir(args) / "sobolev.json", {
        "constant": est.constant, "usable": est.usable, "safety_factor": est.safety_factor,
        "samples": est.sample_count, "center": center, "radius": args.radius})
    return EXIT_OK


def _run_config_from_args(args) -> dict:
    if args.config is not None:
        cfg = load_run_config(args.config)
    else:
        if args.metric is None:
            raise ConfigError("flow needs a metric file or --config")
        cfg = {"metric_file": str(args.metric), "cutoff": {}, "flow": {}}
    cut = cfg.setdefault("cutoff", {})
    if args.center is not None:
        cut["center"] = args.center
    if args.radius is not None:
        cut.pop("radius_fraction", None)
        cut["radius"] = args.radius
    if args.profile is not None:
        cut["profile"] = args.profile
    flow = cfg.setdefault("flow", {})
    for key, value in (("mode", args.mode), ("epsilon", args.epsilon), ("cfl", args.cfl),
                       ("T_target", args.T), ("record_stride", args.stride)):
        if value is not None:
            flow[key] = value
    validate(cfg, RUN_CONFIG_SCHEMA, "run configuration")
    return cfg


def cmd_flow(args) -> int:
    cfg = _run_config_from_args(args)
    if "metric_file" in cfg:
        g0 = _load_metric(cfg["metric_file"])
    else:
        g0 = scenario_from_spec(cfg["scenario"]).metric
    cut = cfg["cutoff"]
    center = resolve_point(g0.grid, cut)
    phi = make_cutoff(g0.grid, center, resolve_radius(g0.grid, cut), cut.get("profile", "cos2"), metric=g0)
    config = flow_config_from_spec(cfg.get("flow"))
    out = Path(args.out if args.out_given else cfg.get("out", args.out))
    out.mkdir(parents=True, exist_ok=True)
    traj = run_flow(g0, phi, config)
    write_trajectory_csv(traj, out / "trajectory.csv")
    write_field(traj.final_state.g, out / "final_metric.json")
    reports = []
    for check in cfg.get("checks", []):
        if check == "smoothing_bound":
            c_s = estimate_sobolev(g0, phi, budget=8, refinements=2).usable
            reports.append(V.check_smoothing_bound(traj, phi, c_s))
        else:
            reports.append(V.check_flow_conditions(traj, g0, config))
    for rep in reports:
        (out / f"{rep.check}.json").write_text(rep.to_json() + "\n")
    _write_json(out / "flow.json", {
        "t_final": traj.final_state.t, "samples": len(traj), "failure": traj.failure,
        "failure_time": traj.failure_time, "conditions": traj.conditions, "center": center,
        "cutoff_radius": phi.support_radius, "config": cfg})
    if traj.failure is not None:
        logger.error("flow stopped at t=%g: %s", traj.failure_time, traj.failure)
        return EXIT_NUMERIC
    return EXIT_OK if all(r.passed for r in reports) else EXIT_CHECK


def cmd_volume(args) -> int:
    g = _load_metric(args.metric)
    node = g.grid.nearest_node(resolve_point(g.grid, {} if args.center is None else {"center": args.center}))
    rows, worst = volume_growth_table(g, node, args.radii)
    out = _out_dir(args)
    with open(out / "volume.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["r", "volume", f"volume_over_r{g.dimension}"])
        for row in rows:
            w.writerow([repr(row.r), repr(row.volume), repr(row.ratio)])
    logger.info("max Vol/r^%d = %.6g", g.dimension, worst)
    return EXIT_OK


def cmd_verify(args) -> int:
    suite = load_suite(args.suite)
    only = set(args.only) if args.only else None
    reports = run_suite(suite, args.out, threads=args.threads, only=only)
    for rep in reports:
        logger.info("%-32s %s", rep.check, rep.verdict)
    return EXIT_OK if V.suite_passed(reports) else EXIT_CHECK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="worker threads for parallel jobs (default 1)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed for randomized inputs")
    common.add_argument("--log-level", default=argparse.SUPPRESS,
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="default WARNING")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default locflow-out)")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="locflow", parents=[common],
                                     description="Localized Ricci flow laboratory")
    parser.add_argument("--version", action="version", version=f"locflow {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="{scenario,curvature,sobolev,flow,volume,verify}")
    sub.required = True

    p = sub.add_parser("scenario", parents=[common], help="write a scenario metric and manifest")
    p.add_argument("name", choices=SCENARIOS)
    p.add_argument("--dim", type=int, default=4)
    p.add_argument("--n", type=int, default=None, help="nodes per axis")
    p.add_argument("--lower", type=float, default=None)
    p.add_argument("--upper", type=float, default=None)
    p.add_argument("--boundary", choices=["periodic", "frozen"], default=None)
    p.add_argument("--param", type=_param, action="append", help="scenario parameter key=value")
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("curvature", parents=[common], help="curvature fields and norms of a metric")
    p.add_argument("metric")
    p.add_argument("--no-bach", action="store_true", help="skip the Bach tensor")
    p.set_defaults(func=cmd_curvature)

    p = sub.add_parser("sobolev", parents=[common], help="estimate the Sobolev constant of a ball")
    p.add_argument("metric")
    p.add_argument("--center", type=_floats, default=None)
    p.add_argument("--radius", type=float, required=True)
    p.add_argument("--budget", type=int, default=16)
    p.set_defaults(func=cmd_sobolev)

    p = sub.add_parser("flow", parents=[common], help="run the localized flow")
    p.add_argument("metric", nargs="?", default=None)
    p.add_argument("--config", default=None, help="run configuration JSON")
    p.add_argument("--center", type=_floats, default=None)
    p.add_argument("--radius", type=float, default=None, help="cutoff support radius")
    p.add_argument("--profile", choices=PROFILES, default=None)
    p.add_argument("--mode", choices=["direct", "deturck"], default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--cfl", type=float, default=None)
    p.add_argument("--T", type=float, default=None, help="target time")
    p.add_argument("--stride", type=int, default=None, help="record every N steps")
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("volume", parents=[common], help="geodesic-ball volume growth table")
    p.add_argument("metric")
    p.add_argument("--center", type=_floats, default=None)
    p.add_argument("--radii", type=_floats, required=True)
    p.set_defaults(func=cmd_volume)

    p = sub.add_parser("verify", parents=[common], help="run a verification suite")
    p.add_argument("suite", help="suite JSON file, or 'acceptance' for the bundled suite")
    p.add_argument("--only", type=lambda s: [v for v in s.split(",") if v], default=None,
                   help="comma-separated check names")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage to stderr
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    args.out_given = hasattr(args, "out")
    for key, default in (("threads", 1), ("seed", None), ("log_level", "WARNING"), ("out", "locflow-out")):
        if not hasattr(args, key):
            setattr(args, key, default)
    logging.basicConfig(level=getattr(logging, args.log_level), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return args.func(args)
    except ValueError as exc:  # ConfigError, FieldFormatError, GridError and rejected check inputs
        print(f"locflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StepFailure as exc:
        print(f"locflow: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
