"""Iterative identification of offramp split ratios from offramp flow targets.

One outer iteration:

1. run with the current offramp splits and record the demand-weighted split
   distribution the solver produced at every offramp node, per interval;
2. re-run, solving each step's offramp split by bisection against the
   interval's target while the rest of each row follows the recorded
   distribution, and average the per-step splits over each interval;
3. run with the averaged splits and compare offramp inflows with the targets.

Iterations stop once the worst relative residual is within ``outer_tol``.
The run of step 3 doubles as step 1 of the next iteration.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bisection import (
    NO_BRACKET,
    SHORT_OF_DEMAND,
    STATUS_NAMES,
    BisectionResult,
    OfframpProblem,
    psi_full_access,
    psi_gated,
    solve_beta_full_access,
    solve_beta_gated,
)
from .engine import CALIB_BISECT, CALIB_RECORD, MetricsReport, SimOutput, Simulator

__all__ = [
    "BisectionResult", "CalibrationReport", "OfframpProblem", "OfframpTarget", "calibrate", "inflows_by_interval", "psi_full_access",
    "psi_gated", "read_targets", "relative_residuals", "solve_beta_full_access", "solve_beta_gated",
]

log = logging.getLogger(__name__)

#: denominators of relative residuals never drop below this many veh/h
MIN_TARGET_VPH = 1.0


@dataclass
class OfframpTarget:
    node: int
    offramp_id: int
    flow_vph: np.ndarray  # per interval

    def __post_init__(self):
        self.flow_vph = np.asarray(self.flow_vph, dtype=float)
        if (self.flow_vph < 0).any():
            raise ValueError(f"offramp {self.offramp_id}: negative target flow")


@dataclass
class CalibrationReport:
    betas: dict[int, np.ndarray]  # offramp id -> per-interval split
    simulated: dict[int, np.ndarray]  # offramp id -> per-interval inflow (veh/h), final run
    targets: dict[int, np.ndarray]
    max_relative_residual: list[float]  # one entry per outer iteration
    outer_iterations: int
    converged: bool
    metrics_initial: MetricsReport
    metrics_final: MetricsReport
    bisection_status: dict[int, dict[str, int]] = field(default_factory=dict)
    diagnostics: list[str] = field(default_factory=list)
    final_output: SimOutput | None = None

    def residuals(self) -> dict[int, np.ndarray]:
        return {o: np.abs(self.simulated[o] - self.targets[o]) for o in self.targets}


def _inflows(out: SimOutput, offramps: list[int], interval_steps: int, cadence_steps: int) -> dict[int, np.ndarray]:
    """Per-interval offramp inflow in veh/h, from cadence-level output."""
    if interval_steps % cadence_steps:
        raise ValueError("output cadence must divide the demand interval")
    r = interval_steps // cadence_steps
    res = {}
    for o in offramps:
        col = out.inflow[:, out.link_ids.index(o)]
        n = len(col) // r * r
        blocks = col[:n].reshape(-1, r).mean(axis=1)
        if n < len(col):
            blocks = np.append(blocks, col[n:].mean())
        res[o] = blocks
    return res


def inflows_by_interval(out: SimOutput, offramps: list[int], interval_s: float) -> dict[int, np.ndarray]:
    """Per-interval offramp inflow (veh/h) of a finished run."""
    starts = out.interval_starts
    cadence = float(starts[1] - starts[0]) if len(starts) > 1 else float(interval_s)
    return _inflows(out, offramps, int(round(interval_s / cadence)), 1)


def relative_residuals(sim: np.ndarray, tgt: np.ndarray) -> np.ndarray:
    k = min(len(sim), len(tgt))
    return np.abs(sim[:k] - tgt[:k]) / np.maximum(tgt[:k], MIN_TARGET_VPH)


def calibrate(
    sim: Simulator,
    horizon_s: float,
    targets: list[OfframpTarget],
    *,
    outer_tol: float = 0.02,
    max_outer: int = 5,
    initial_split: float | None = 0.05,
) -> CalibrationReport:
    """Fit per-interval offramp splits so simulated offramp inflows match ``targets``.

    ``initial_split`` seeds every targeted offramp (``None`` keeps the
    network's configured splits and any existing control profiles).
    """
    cn = sim.cn
    by_node = {t.node: t for t in targets}
    for t in targets:
        if cn.offramp_of_node.get(t.node) != t.offramp_id:
            raise ValueError(f"offramp {t.offramp_id} does not leave node {t.node}")
    T = int(round(horizon_s / sim.dt_s))
    step_int = max(1, int(round(sim.controls.interval_s / sim.dt_s)))
    step_cad = max(1, int(round(sim.cadence_s / sim.dt_s)))
    n_int = -(-T // step_int)
    tgt_arrays = {t.node: t.flow_vph for t in targets}
    offramps = [t.offramp_id for t in targets]
    if initial_split is not None:
        for nid in by_node:
            sim.controls.offramp_splits[nid] = np.full(n_int, float(initial_split))

    out = sim.run(horizon_s, calib_mode=CALIB_RECORD)
    metrics_initial = out.metrics
    history: list[float] = []
    diagnostics: list[str] = []
    status: dict[int, dict[str, int]] = {}
    converged = False
    it = 0
    for it in range(1, max_outer + 1):
        remaining = {nid: out.splits[nid] for nid in by_node}
        bis = sim.run(horizon_s, calib_mode=CALIB_BISECT, targets=tgt_arrays, remaining=remaining,
                      availability=out.availability)
        for nid in by_node:
            b = bis.calibrated_beta[nid]
            prev = np.asarray(sim.controls.offramp_splits.get(nid, np.zeros(n_int)), dtype=float)
            b = np.where(np.isnan(b), prev[: len(b)] if len(prev) >= len(b) else 0.0, b)
            sim.controls.offramp_splits[nid] = np.clip(b, 0.0, 1.0)
            counts = bis.bisection_status[nid]
            status[by_node[nid].offramp_id] = {STATUS_NAMES[k]: int(v) for k, v in enumerate(counts) if v and k in STATUS_NAMES}
        out = sim.run(horizon_s, calib_mode=CALIB_RECORD)
        sim_flows = _inflows(out, offramps, step_int, step_cad)
        worst = max((float(relative_residuals(sim_flows[by_node[n].offramp_id], t).max(initial=0.0))
                     for n, t in tgt_arrays.items()), default=0.0)
        history.append(worst)
        log.info("outer iteration %d: max relative offramp residual %.4g", it, worst)
        if worst <= outer_tol:
            converged = True
            break
    sim_flows = _inflows(out, offramps, step_int, step_cad)
    for nid, t in by_node.items():
        short = status.get(t.offramp_id, {}).get(STATUS_NAMES[SHORT_OF_DEMAND], 0)
        if short:
            diagnostics.append(
                f"offramp {t.offramp_id}: upstream demand below target in {short} steps; simulated flow falls short there"
            )
        nb = status.get(t.offramp_id, {}).get(STATUS_NAMES[NO_BRACKET], 0)
        if nb:
            diagnostics.append(f"offramp {t.offramp_id}: no bracket in {nb} steps (target not attainable under congestion)")
    if not converged:
        diagnostics.append(f"not converged after {it} outer iterations (max relative residual {history[-1]:.4g})")
    return CalibrationReport(
        betas={by_node[n].offramp_id: np.asarray(sim.controls.offramp_splits[n]) for n in by_node},
        simulated=sim_flows,
        targets={t.offramp_id: t.flow_vph for t in targets},
        max_relative_residual=history,
        outer_iterations=it,
        converged=converged,
        metrics_initial=metrics_initial,
        metrics_final=out.metrics,
        bisection_status=status,
        diagnostics=diagnostics,
        final_output=out,
    )


def read_targets(path: str | Path, net, interval_s: float) -> list[OfframpTarget]:
    """Targets CSV with columns ``interval_start, offramp_id, flow_vph``.

    ``interval_start`` is in seconds from the start of the run.
    """
    rows: dict[int, dict[int, float]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"interval_start", "offramp_id", "flow_vph"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for line, rec in enumerate(reader, start=2):
            try:
                oid = int(rec["offramp_id"])
                k = int(round(float(rec["interval_start"]) / interval_s))
                rows.setdefault(oid, {})[k] = float(rec["flow_vph"])
            except ValueError as exc:
                raise ValueError(f"{path}, line {line}: {exc}") from None
    out = []
    for oid, series in sorted(rows.items()):
        if oid not in net.links:
            raise ValueError(f"{path}: offramp {oid} is not a link of the network")
        node = net.links[oid].begin_node
        arr = np.zeros(max(series) + 1)
        for k, v in series.items():
            arr[k] = v
        out.append(OfframpTarget(node, oid, arr))
    return out
