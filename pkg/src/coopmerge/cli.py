"""Command-line entry point.

Subcommands: run (simulate a scenario, write trace CSV + summary JSON),
validate (schema check only), report (summary statistics from an existing
trace).  Exit codes: 0 ok, 1 usage, 2 schema, 3 simulation abort.
Log verbosity comes from the COOPMERGE_LOG environment variable
(debug | info | warning; default warning).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import SchemaError, SemanticError, SimulationAbort
from .scenario import load_scenario
from .simulation import TRACE_COLUMNS, export_summary, export_trace, run_closed_loop

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_SCHEMA = 2
EXIT_ABORT = 3

log = logging.getLogger("coopmerge")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    parser = _Parser(prog="coopmerge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run_p = sub.add_parser("run", help="simulate a scenario")
    run_p.add_argument("--scenario", required=True, help="scenario JSON path")
    run_p.add_argument("--out-dir", required=True, help="output directory")
    run_p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run_p.add_argument("--duration", type=float, default=None, help="override duration (s)")

    val_p = sub.add_parser("validate", help="schema-check a scenario file")
    val_p.add_argument("--scenario", required=True)

    rep_p = sub.add_parser("report", help="summary statistics from a trace CSV")
    rep_p.add_argument("--trace", required=True)
    rep_p.add_argument("--out", default=None, help="write JSON here instead of stdout")
    return parser


def _cmd_run(args) -> int:
    scenario = load_scenario(args.scenario).with_overrides(seed=args.seed, duration=args.duration)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        trace, summary = run_closed_loop(scenario)
    except SimulationAbort as exc:
        if exc.trace is not None:
            export_trace(exc.trace, out_dir / f"{scenario.name}.trace.csv")
        print(f"simulation aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    export_trace(trace, out_dir / f"{scenario.name}.trace.csv")
    export_summary(summary, out_dir / f"{scenario.name}.summary.json")
    log.info("wrote %s.trace.csv and %s.summary.json", scenario.name, scenario.name)
    print(
        f"{scenario.name}: {summary.steps} steps, "
        f"mean step time {summary.solver['mean_step_time_s']:.3f} s, "
        f"coalition type at end {summary.coalition_timeline[-1]['type']}"
    )
    return EXIT_OK


def _cmd_validate(args) -> int:
    load_scenario(args.scenario)
    print(f"{args.scenario}: ok")
    return EXIT_OK


def _cmd_report(args) -> int:
    path = Path(args.trace)
    lines = path.read_text().strip().splitlines()
    header = lines[0].split(",")
    if tuple(header) != TRACE_COLUMNS:
        raise SchemaError(f"{path}: unexpected trace header {header}")
    rows = [dict(zip(header, line.split(","))) for line in lines[1:]]

    by_vehicle: dict[str, list[dict]] = {}
    for row in rows:
        by_vehicle.setdefault(row["vehicle_id"], []).append(row)
    report = {"trace": str(path), "rows": len(rows), "vehicles": {}}
    for vid, vrows in sorted(by_vehicle.items()):
        costs = np.array([float(r["J_total"]) for r in vrows])
        vxs = np.array([float(r["vx"]) for r in vrows])
        lanes = [int(r["lane"]) for r in vrows]
        report["vehicles"][vid] = {
            "rms_cost": float(np.sqrt(np.mean(costs**2))),
            "mean_vx": float(np.mean(vxs)),
            "min_vx": float(np.min(vxs)),
            "max_vx": float(np.max(vxs)),
            "initial_lane": lanes[0],
            "final_lane": lanes[-1],
            "lane_changes": int(sum(1 for a, b in zip(lanes, lanes[1:]) if a != b)),
        }
    text = json.dumps(report, sort_keys=True, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("COOPMERGE_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "validate":
            return _cmd_validate(args)
        if args.command == "report":
            return _cmd_report(args)
    except (SchemaError, SemanticError) as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
