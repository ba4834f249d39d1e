"""Result files. Floats are written with 6 significant digits so that identical
runs produce identical bytes."""
from __future__ import annotations

import csv
import json
from pathlib import Path

from .calibration import CalibrationReport, relative_residuals
from .engine import SimOutput, speed_field

CONTOUR_COLUMNS = ("interval_start_s", "link_id", "lane_group", "density_vpmpl", "flow_vphpl", "speed_mph")
SPLIT_COLUMNS = ("interval_start_s", "offramp_id", "beta", "target_vph", "simulated_vph", "relative_residual")
RESIDUAL_COLUMNS = ("outer_iteration", "max_relative_residual")


def fmt(x: float) -> str:
    return f"{x:.6g}"


def _round(obj):
    if isinstance(obj, float):
        return float(fmt(obj))
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    return obj


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_round(obj), indent=2) + "\n")


def write_contours(path: str | Path, out: SimOutput) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CONTOUR_COLUMNS)
        for start, lid, group, dens, flow, speed in speed_field(out):
            w.writerow((fmt(start), lid, group, fmt(dens), fmt(flow), fmt(speed)))


def write_metrics(path: str | Path, out: SimOutput) -> None:
    body = out.metrics.as_dict()
    body["conservation"] = {"imbalance_veh": out.audit.imbalance, "relative_imbalance": out.audit.relative_imbalance}
    _write_json(Path(path), body)


def write_resolved(path: str | Path, resolved: dict) -> None:
    _write_json(Path(path), resolved)


def write_splits(path: str | Path, report: CalibrationReport, interval_s: float) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SPLIT_COLUMNS)
        for oid in sorted(report.betas):
            beta = report.betas[oid]
            tgt = report.targets[oid]
            sim = report.simulated[oid]
            rel = relative_residuals(sim, tgt)
            for k in range(len(rel)):
                w.writerow((fmt(k * interval_s), oid, fmt(beta[min(k, len(beta) - 1)]), fmt(tgt[k]), fmt(sim[k]),
                            fmt(rel[k])))


def write_residuals(path: str | Path, report: CalibrationReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESIDUAL_COLUMNS)
        for i, r in enumerate(report.max_relative_residual, start=1):
            w.writerow((i, fmt(r)))
