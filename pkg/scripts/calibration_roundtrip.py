"""Calibration round trip on the synthetic fixture.

Runs the fixture with known time-varying offramp splits, writes the resulting
offramp flows as calibration targets, then recovers the splits from those
targets and reports residuals and split errors.

    python3 scripts/calibration_roundtrip.py [--write]

``--write`` refreshes ``scenarios/calibration_truth.csv`` and
``scenarios/calibration_targets.csv``.
"""
from __future__ import annotations

import argparse
import csv
import time
from pathlib import Path

import numpy as np

from mlsim.calibration import OfframpTarget, calibrate, inflows_by_interval
from mlsim.scenario import parse_scenario

ROOT = Path(__file__).resolve().parents[1]
SCENARIO = ROOT / "scenarios" / "calibration_fixture.json"
TRUTH = ROOT / "scenarios" / "calibration_truth.csv"
TARGETS = ROOT / "scenarios" / "calibration_targets.csv"


def truth_splits(n_int: int) -> dict[int, np.ndarray]:
    """Known splits per offramp node: smooth, time-varying, between 0.08 and 0.18."""
    k = np.arange(n_int)
    return {2: 0.08 + 0.05 * np.sin(k / 9.0) ** 2, 4: 0.12 + 0.06 * np.cos(k / 7.0) ** 2}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--write", action="store_true", help="rewrite the truth and target CSV files")
    args = ap.parse_args()

    cfg = parse_scenario(SCENARIO)
    sc, net = cfg.scenario, cfg.network
    n_int = int(round(cfg.horizon_s / sc.interval_s))
    truth = truth_splits(n_int)
    off = {nid: net.nodes[nid].outputs[-1] for nid in truth}

    sim = cfg.simulator()
    sim.controls.offramp_splits.update(truth)
    flows = inflows_by_interval(sim.run(cfg.horizon_s), list(off.values()), sc.interval_s)
    if args.write:
        with open(TRUTH, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("interval_start", "offramp_id", "beta"))
            for nid, b in truth.items():
                for k, x in enumerate(b):
                    w.writerow((int(k * sc.interval_s), off[nid], f"{x:.10g}"))
        with open(TARGETS, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("interval_start", "offramp_id", "flow_vph"))
            for oid, q in flows.items():
                for k, x in enumerate(q):
                    w.writerow((int(k * sc.interval_s), oid, f"{x:.10g}"))
        print(f"wrote {TRUTH.name} and {TARGETS.name}")

    targets = [OfframpTarget(nid, off[nid], flows[off[nid]]) for nid in truth]
    fresh = parse_scenario(SCENARIO).simulator()
    t0 = time.perf_counter()
    rep = calibrate(fresh, cfg.horizon_s, targets, outer_tol=sc.calibration.outer_tol,
                    max_outer=sc.calibration.max_outer, initial_split=None)
    print(f"calibration: {time.perf_counter() - t0:.2f} s, {rep.outer_iterations} outer iterations, "
          f"residuals {np.round(rep.max_relative_residual, 4).tolist()}, converged={rep.converged}")
    for nid, oid in off.items():
        err = np.abs(rep.betas[oid] - truth[nid])
        print(f"offramp {oid}: max split error {err.max():.4f}, median {np.median(err):.4f}")


if __name__ == "__main__":
    main()
