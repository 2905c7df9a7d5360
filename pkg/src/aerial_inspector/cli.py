"""``inspect`` command line: generate, plan, simulate and evaluate a mission.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import re
import sys

from .config import ConfigError, load_config
from .localization.models import LocalizationError
from .mission import MissionError, coverage_band, coverage_report, run_mission, safety_audit
from .planner import MissionPlan, PlanningError, plan_mission, read_agent_csv, slice_levels, write_agent_csv
from .report import build_report, export_report, read_trace_csv, write_report
from .structures import SolidModel, StructureError, generate_turbine, load_point_cloud, save_point_cloud

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

CLOUD_FILE = "structure.xyz"
SOLID_FILE = "structure_solid.json"
PLAN_SUMMARY = "plan_summary.json"


class CommandError(RuntimeError):
    pass


def _load_structure(cfg):
    """(cloud, solid) from the turbine spec or the configured files."""
    if cfg.turbine is not None:
        return generate_turbine(cfg.turbine)
    cloud = load_point_cloud(cfg.cloud_path)
    solid = None
    if cfg.solid_path is not None:
        try:
            with open(cfg.solid_path) as fh:
                solid = SolidModel.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise StructureError(f"cannot read solid model {cfg.solid_path}: {exc}") from None
    return cloud, solid


def _write_json(data, path):
    with open(path, "w") as fh:
        fh.write(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _plan_files(out_dir):
    files = glob.glob(os.path.join(out_dir, "plan_agent*.csv"))
    return sorted(files, key=lambda f: int(re.search(r"plan_agent(\d+)\.csv$", f).group(1)))


def _trace_files(out_dir):
    files = glob.glob(os.path.join(out_dir, "trace_agent*.csv"))
    return sorted(files, key=lambda f: int(re.search(r"trace_agent(\d+)\.csv$", f).group(1)))


def _mission_info(cfg, traces):
    p = cfg.planner
    return {
        "n_agents": len(traces),
        "duration": float(traces[0].t[-1] - traces[0].t[0]),
        "z_start": p.z_start,
        "z_end": p.z_end,
        "omega": p.omega,
        "alpha": p.alpha,
        "beta": p.beta,
        "v_d": p.v_d,
        "d_s": p.d_s,
        "r_max": p.r_max,
        "plane_spacing": p.plane_spacing,
        "slice_levels": [float(v) for v in slice_levels(p.z_start, p.z_end, p.plane_spacing)],
        "camera_rate": cfg.camera_rate,
    }


def _analyse(cfg, traces, cloud, solid):
    p = cfg.planner
    band = coverage_band(p.z_start, p.z_end, p.omega, p.alpha)
    coverage = coverage_report(traces, cloud, solid, p.alpha, p.r_max, band, cfg.camera_rate,
                               overlap_band=(p.z_start, p.z_end))
    safety = safety_audit(traces, p.d_s, solid, p.omega)
    report = build_report(_mission_info(cfg, traces), traces, coverage, safety, cfg.seed, cfg.config_hash)
    return coverage, safety, report


# ---------------------------------------------------------------- commands


def cmd_generate(cfg, out):
    cfg.require("structure")
    cloud, solid = _load_structure(cfg)
    os.makedirs(out, exist_ok=True)
    save_point_cloud(cloud, os.path.join(out, CLOUD_FILE))
    if solid is not None:
        _write_json(solid.to_dict(), os.path.join(out, SOLID_FILE))
    print(f"wrote {len(cloud)} points to {os.path.join(out, CLOUD_FILE)}")


def cmd_plan(cfg, out):
    cfg.require("structure", "planner")
    cloud, solid = _load_structure(cfg)
    plan = plan_mission(cloud, solid, cfg.planner)
    os.makedirs(out, exist_ok=True)
    for stale in _plan_files(out):
        os.remove(stale)
    for path in plan.paths:
        write_agent_csv(path, os.path.join(out, f"plan_agent{path.agent_id}.csv"))
    summary = plan.summary()
    _write_json(summary, os.path.join(out, PLAN_SUMMARY))
    print(f"{summary['slice_count']} slices, branches per slice {summary['branch_counts']}")
    for a in summary["agents"]:
        print(f"agent {a['agent']}: duration {a['duration']:.2f} s, path length {a['path_length']:.2f} m")


def cmd_simulate(cfg, out):
    cfg.require("structure", "planner", "anchors")
    files = _plan_files(out)
    if not files:
        raise CommandError(f"no plan files in {out}; run 'inspect plan' first")
    paths = [read_agent_csv(f) for f in files]
    cloud, solid = _load_structure(cfg)
    p = cfg.planner
    plan = MissionPlan(p, paths, [], slice_levels(p.z_start, p.z_end, p.plane_spacing))
    traces = run_mission(plan, cfg.anchors, solid, uwb=cfg.uwb, wind=cfg.wind, vehicle=cfg.vehicle,
                         mpc=cfg.controller, sim=cfg.sim)
    coverage, safety, report = _analyse(cfg, traces, cloud, solid)
    export_report(traces, coverage, safety, report, out)
    _print_summary(report)


def cmd_evaluate(cfg, out):
    cfg.require("structure", "planner")
    files = _trace_files(out)
    if not files:
        raise CommandError(f"no trace files in {out}; run 'inspect simulate' first")
    traces = [read_trace_csv(f) for f in files]
    cloud, solid = _load_structure(cfg)
    _, _, report = _analyse(cfg, traces, cloud, solid)
    write_report(report, os.path.join(out, "report.json"))
    _print_summary(report)


def _print_summary(report):
    print(f"seed {report['seed']}  config {report['config_hash'][:12]}")
    for a in report["agents"]:
        print(f"agent {a['agent']}: rmse {a['rmse_reference']:.3f} m (estimate {a['rmse_estimate']:.3f} m)")
    cov = report["coverage"]
    print(f"coverage {cov['covered_fraction']:.4f}, overlap {cov['overlap_fraction']:.4f}, "
          f"{len(report['safety']['violations'])} safety violation(s)")


COMMANDS = {"generate": cmd_generate, "plan": cmd_plan, "simulate": cmd_simulate, "evaluate": cmd_evaluate}


def build_parser():
    parser = argparse.ArgumentParser(prog="inspect", description="Cooperative structure-inspection missions.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="mission TOML file")
    parser.add_argument("--seed", type=int, help="override [sim] seed")
    parser.add_argument("--out", help="override [output] directory")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        cfg = load_config(args.config, seed=args.seed, out_dir=args.out)
    except ConfigError as exc:
        print(f"inspect: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        COMMANDS[args.command](cfg, cfg.output_dir)
    except ConfigError as exc:
        print(f"inspect: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PlanningError as exc:
        print(f"inspect: planning failed at stage '{exc.stage}': {exc.message}", file=sys.stderr)
        return EXIT_FAILURE
    except (MissionError, StructureError, LocalizationError, CommandError, OSError) as exc:
        print(f"inspect: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
