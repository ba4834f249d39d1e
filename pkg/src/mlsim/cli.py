"""Command-line interface: ``mlsim run | calibrate | validate``.

Exit codes: 0 success, 1 invalid scenario or inputs, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2

log = logging.getLogger("mlsim")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlsim", description="Freeway simulation with managed lanes.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--scenario", required=True, type=Path, help="scenario JSON file")
        sp.add_argument("--lenient", action="store_true", help="ignore unknown fields instead of failing")

    sp = sub.add_parser("run", help="simulate a scenario and write contours and metrics")
    common(sp)
    sp.add_argument("--out", required=True, type=Path, help="output directory")
    sp.add_argument("--seed", type=int, default=None, help="recorded only; the engine is deterministic")

    sp = sub.add_parser("calibrate", help="fit offramp split ratios to measured offramp flows")
    common(sp)
    sp.add_argument("--out", required=True, type=Path, help="output directory")
    sp.add_argument("--targets", required=True, type=Path,
                    help="CSV with columns interval_start (s), offramp_id, flow_vph")
    sp.add_argument("--outer-tol", type=float, default=None, help="override calibration.outer_tol")
    sp.add_argument("--max-outer", type=int, default=None, help="override calibration.max_outer")
    sp.add_argument("--seed", type=int, default=None, help="recorded only; the engine is deterministic")

    sp = sub.add_parser("validate", help="check a scenario and list diagnostics")
    common(sp)
    return p


def _apply_threads() -> None:
    raw = os.environ.get("MLSIM_THREADS")
    if not raw:
        return
    import numba

    n = int(raw)
    if n < 1:
        raise ValueError("MLSIM_THREADS must be a positive integer")
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _run(args, cfg) -> int:
    from .outputs import write_contours, write_metrics, write_resolved

    sim = cfg.simulator()
    out = sim.run(cfg.horizon_s)
    args.out.mkdir(parents=True, exist_ok=True)
    write_contours(args.out / "contours.csv", out)
    write_metrics(args.out / "metrics.json", out)
    write_resolved(args.out / "resolved_config.json", cfg.resolved(args.seed))
    print(f"wrote {args.out}/contours.csv, metrics.json, resolved_config.json")
    return EXIT_OK


def _calibrate(args, cfg) -> int:
    from .calibration import calibrate, read_targets
    from .outputs import write_contours, write_metrics, write_resolved, write_residuals, write_splits

    sc = cfg.scenario
    targets = read_targets(args.targets, cfg.network, sc.interval_s)
    c = sc.calibration
    report = calibrate(
        cfg.simulator(),
        cfg.horizon_s,
        targets,
        outer_tol=args.outer_tol if args.outer_tol is not None else c.outer_tol,
        max_outer=args.max_outer if args.max_outer is not None else c.max_outer,
        initial_split=c.initial_split,
    )
    args.out.mkdir(parents=True, exist_ok=True)
    write_contours(args.out / "contours.csv", report.final_output)
    write_metrics(args.out / "metrics.json", report.final_output)
    write_resolved(args.out / "resolved_config.json", cfg.resolved(args.seed))
    write_splits(args.out / "splits.csv", report, sc.interval_s)
    write_residuals(args.out / "residuals.csv", report)
    for d in report.diagnostics:
        print(f"note: {d}", file=sys.stderr)
    state = "converged" if report.converged else "not converged"
    print(f"{state} after {report.outer_iterations} outer iterations; "
          f"max relative residual {report.max_relative_residual[-1]:.4g}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    from .engine import SimulationError
    from .scenario import ScenarioError, parse_scenario

    try:
        cfg = parse_scenario(args.scenario, strict=not args.lenient)
    except ScenarioError as exc:
        for msg in exc.problems:
            print(f"error: {msg}", file=sys.stderr)
        return EXIT_INVALID
    for w in cfg.warnings:
        print(w, file=sys.stderr)
    if args.command == "validate":
        print(f"{args.scenario}: valid ({len(cfg.network.links)} links, {len(cfg.network.nodes)} nodes, "
              f"{len(cfg.warnings)} warnings)")
        return EXIT_OK
    try:
        _apply_threads()
        if args.command == "run":
            return _run(args, cfg)
        return _calibrate(args, cfg)
    except ValueError as exc:
        # bad targets file or environment setting
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (SimulationError, OSError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
