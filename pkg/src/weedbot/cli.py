"""Command-line entry points: headless mission runs, the live service, and
trace export.

Exit codes: 0 mission ran to completion per policy, 2 configuration problem,
3 runtime invariant breach (including failure to finish in the time budget).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, default_scenario, load_scenario, scenario_to_dict
from .localization import NonPsdCovarianceError
from .mission_control import WeedMapError, load_weed_map
from .runtime import TRACE_HEADER, RobotRuntime
from .service import RobotService

WEEDING_HEADER = "time_s,x_m,y_m,z_m,angle_rad,fz_N,f_set_N,phase"

EXPORT_TRACES = {
    "contact_force": ("time_s,fz_N", ("time", "fz")),
    "flange_position": ("time_s,x_m,y_m,z_m", ("time", "x", "y", "z")),
    "flange_rotation": ("time_s,angle_rad", ("time", "angle")),
}


def _fmt(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def write_artifacts(rt: RobotRuntime, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "trace.csv").open("w") as f:
        f.write(TRACE_HEADER + "\n")
        for row in rt.trace_rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")
    with (out / "mission_log.jsonl").open("w") as f:
        for entry in rt.mission_log:
            f.write(json.dumps(entry, separators=(",", ":")) + "\n")
    (out / "metrics.json").write_text(json.dumps(rt.metrics, indent=2) + "\n")
    (out / "scenario_resolved.json").write_text(
        json.dumps(scenario_to_dict(rt.cfg), indent=2) + "\n")
    for weed_id, trace in sorted(rt.weeding_traces.items()):
        with (out / f"weeding_{weed_id}.csv").open("w") as f:
            f.write(WEEDING_HEADER + "\n")
            for i in range(len(trace["time"])):
                f.write(",".join([
                    _fmt(float(trace["time"][i])), _fmt(float(trace["x"][i])),
                    _fmt(float(trace["y"][i])), _fmt(float(trace["z"][i])),
                    _fmt(float(trace["angle"][i])), _fmt(float(trace["fz"][i])),
                    _fmt(float(trace["f_set"][i])), trace["phase"][i]]) + "\n")


def build_runtime(scenario_path, weed_map_path, seed=None) -> RobotRuntime:
    scenario = (load_scenario(scenario_path) if scenario_path
                else default_scenario())
    if seed is not None:
        scenario.seed = seed
    rt = RobotRuntime(scenario)
    if weed_map_path:
        rt.load_mission(load_weed_map(weed_map_path))
    return rt


def cmd_run(args) -> int:
    try:
        rt = build_runtime(args.scenario, args.weed_map, args.seed)
    except (ConfigError, WeedMapError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if rt.mission is None:
        print("error: run requires a weed map", file=sys.stderr)
        return 2
    rt.start_mission()
    try:
        completed = rt.run_until_mission_complete(args.max_sim_time)
    except (NonPsdCovarianceError, AssertionError) as exc:
        print(f"invariant breach: {exc}", file=sys.stderr)
        if args.out_dir:
            write_artifacts(rt, args.out_dir)
        return 3
    if args.out_dir:
        write_artifacts(rt, args.out_dir)
    counts = rt.mission.counts()
    print(f"mission finished at t={rt.world.time:.1f}s: {counts}; "
          f"outcomes={rt.metrics['outcomes']}")
    if not completed:
        print("error: mission did not complete within the time budget",
              file=sys.stderr)
        return 3
    return 0


def cmd_serve(args) -> int:
    try:
        rt = build_runtime(args.scenario, args.weed_map, args.seed)
    except (ConfigError, WeedMapError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        service = RobotService(rt, host=args.host, port=args.port,
                               rate=args.rate)
    except OSError as exc:
        print(f"error: cannot bind port {args.port}: {exc}", file=sys.stderr)
        return 2
    print(f"serving on ws://{args.host}:{service.port} "
          f"(rate x{args.rate}, telemetry 10 Hz)")
    service.run_forever()
    return 0


def cmd_export(args) -> int:
    run_dir = Path(args.run_dir)
    if args.what not in EXPORT_TRACES:
        print(f"error: unknown trace '{args.what}'; available: "
              f"{', '.join(sorted(EXPORT_TRACES))}", file=sys.stderr)
        return 2
    header, columns = EXPORT_TRACES[args.what]
    sources = sorted(run_dir.glob("weeding_*.csv"))
    if not sources:
        print(f"error: no weeding traces in {run_dir}", file=sys.stderr)
        return 2
    out_path = Path(args.out) if args.out else run_dir / f"{args.what}.csv"
    in_cols = WEEDING_HEADER.split(",")
    idx = [in_cols.index({"time": "time_s", "x": "x_m", "y": "y_m",
                          "z": "z_m", "angle": "angle_rad", "fz": "fz_N",
                          "f_set": "f_set_N"}[c]) for c in columns]
    with out_path.open("w") as out:
        out.write(header + "\n")
        for src in sources:
            lines = src.read_text().splitlines()[1:]
            for line in lines:
                parts = line.split(",")
                out.write(",".join(parts[i] for i in idx) + "\n")
    print(f"wrote {out_path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="weedbot",
        description="Weeding-robot stack over a simulated pasture")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a mission headless")
    p_run.add_argument("--scenario", default=None,
                       help="scenario JSON (or shipped name: loose_soil, hard_ground)")
    p_run.add_argument("--weed-map", required=False, default=None)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out-dir", default=None)
    p_run.add_argument("--max-sim-time", type=float, default=600.0)
    p_run.set_defaults(func=cmd_run)

    p_serve = sub.add_parser("serve", help="serve telemetry/commands live")
    p_serve.add_argument("--scenario", default=None)
    p_serve.add_argument("--weed-map", default=None)
    p_serve.add_argument("--seed", type=int, default=None)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8787)
    p_serve.add_argument("--rate", type=float, default=1.0,
                         help="sim-time over wall-time factor (0 = unpaced)")
    p_serve.set_defaults(func=cmd_serve)

    p_export = sub.add_parser("export", help="export run traces as CSV")
    p_export.add_argument("--run-dir", required=True)
    p_export.add_argument("--what", required=True)
    p_export.add_argument("--out", default=None)
    p_export.set_defaults(func=cmd_export)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
