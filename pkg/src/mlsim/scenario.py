"""Scenario files: a versioned JSON schema, parsing with defaults, and builders.

A scenario describes a freeway as a list of segments (each with GP and
managed lanes), ramps at interior nodes, demand profiles and run settings.
Field paths in error messages use the JSON layout, e.g. ``segments[3].length_mi``.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .engine import Controls, Simulator
from .link import FundamentalDiagram
from .network import (
    LaneGroup,
    Network,
    RampSpec,
    SegmentSpec,
    _rep,
    build_full_access,
    build_gated_access,
    validate,
)

SCHEMA_VERSION = 1

KIND_DEFAULTS = {
    "gp": {"capacity_vphl": 1900.0, "free_flow_mph": 65.0, "jam_density_vpmpl": 150.0},
    "ml": {"capacity_vphl": 1800.0, "capacity_inactive_vphl": 1900.0, "free_flow_mph": 70.0,
           "jam_density_vpmpl": 150.0},
    "onramp": {"capacity_vphl": 1900.0, "free_flow_mph": 65.0, "jam_density_vpmpl": 150.0},
    "offramp": {"capacity_vphl": 1900.0, "free_flow_mph": 65.0, "jam_density_vpmpl": 150.0},
}

_CLOCK = re.compile(r"^(\d{1,2}):([0-5]\d)$")


class ScenarioError(ValueError):
    """Raised with one message per problem found in a scenario."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("\n".join(self.problems))


def clock_hours(text: str) -> float:
    """``"HH:MM"`` to hours; hours may exceed 23 for runs longer than a day."""
    m = _CLOCK.match(text)
    if not m:
        raise ValueError(f"expected HH:MM, got {text!r}")
    return int(m.group(1)) + int(m.group(2)) / 60.0


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class FDParams(_Strict):
    """Per-lane diagram parameters; unset fields take the link kind's default."""

    capacity_vphl: float | None = Field(None, gt=0)
    capacity_inactive_vphl: float | None = Field(None, gt=0)  # managed lanes with the policy off
    free_flow_mph: float | None = Field(None, gt=0)
    jam_density_vpmpl: float | None = Field(None, gt=0)
    wave_speed_mph: float | None = Field(None, gt=0)  # default: one fifth of free-flow speed


class Profile(_Strict):
    """Per-interval ``values``, or ``points`` ("HH:MM", value) interpolated linearly."""

    values: list[float] | None = None
    points: list[tuple[str, float]] | None = None

    @model_validator(mode="after")
    def _one_form(self):
        if (self.values is None) == (self.points is None):
            raise ValueError("give exactly one of 'values' or 'points'")
        vals = self.values if self.values is not None else [v for _, v in self.points]
        if not vals:
            raise ValueError("profile is empty")
        if any(not math.isfinite(v) or v < 0 for v in vals):
            raise ValueError("profile values must be finite and nonnegative")
        if self.points is not None:
            hours = [clock_hours(t) for t, _ in self.points]
            if any(b <= a for a, b in zip(hours, hours[1:])):
                raise ValueError("profile times must increase")
        return self

    def sample(self, n_intervals: int, interval_h: float) -> np.ndarray:
        if self.values is not None:
            v = np.asarray(self.values, dtype=float)
            idx = np.minimum(np.arange(n_intervals), len(v) - 1)
            return v[idx]
        hours = np.array([clock_hours(t) for t, _ in self.points])
        vals = np.array([v for _, v in self.points], dtype=float)
        mid = (np.arange(n_intervals) + 0.5) * interval_h
        return np.interp(mid, hours, vals)


class Segment(_Strict):
    length_mi: float = Field(gt=0)
    gp_lanes: int = Field(3, ge=1)
    ml_lanes: int = Field(1, ge=1)
    gp_fd: FDParams = FDParams()
    ml_fd: FDParams = FDParams()
    sigma: float | None = Field(None, ge=0, le=1)  # friction coefficient of the managed lane


class Onramp(_Strict):
    node: int = Field(ge=1)
    lanes: int = Field(1, ge=1)
    length_mi: float = Field(0.25, gt=0)
    fd: FDParams = FDParams()
    demand: Profile


class Offramp(_Strict):
    node: int = Field(ge=1)
    lanes: int = Field(1, ge=1)
    length_mi: float = Field(0.25, gt=0)
    fd: FDParams = FDParams()
    split: float = Field(0.0, ge=0, le=1)
    split_profile: Profile | None = None
    assumption: Literal[1, 2, 3] = 3  # which inputs exit here (full access only)

    @field_validator("split_profile")
    @classmethod
    def _fractions(cls, p):
        if p is not None:
            vals = p.values if p.values is not None else [v for _, v in p.points]
            if any(v > 1 for v in vals):
                raise ValueError("split ratios must lie in [0, 1]")
        return p


class Window(_Strict):
    start: str
    end: str

    @model_validator(mode="after")
    def _order(self):
        if clock_hours(self.end) <= clock_hours(self.start):
            raise ValueError("window must end after it starts")
        return self


class SolverSettings(_Strict):
    bisection_tol: float = Field(1e-3, gt=0)  # veh/step
    bisection_max_iter: int = Field(60, ge=1)


class CalibrationSettings(_Strict):
    outer_tol: float = Field(0.02, gt=0)
    max_outer: int = Field(5, ge=1)
    initial_split: float | None = Field(None, ge=0, le=1)  # None keeps the offramp splits above


class Scenario(_Strict):
    schema_version: int
    name: str = "scenario"
    access: Literal["full_access", "gated_access"]
    dt_s: float = Field(5.0, gt=0)
    horizon_h: float = Field(24.0, gt=0)
    interval_s: float = Field(300.0, gt=0)  # demand and split profiles
    output_cadence_s: float = Field(300.0, gt=0)
    special_share: float = Field(0.15, ge=0, le=1)
    special_ml_share: float = Field(0.5, ge=0, le=1)  # of mainline special demand, entering on the ML
    sigma: float = Field(0.0, ge=0, le=1)  # default friction coefficient of managed lanes
    delay_speed_mph: float = Field(45.0, gt=0)
    metrics_include_ramps: bool = False
    fd_defaults: dict[Literal["gp", "ml", "onramp", "offramp"], FDParams] = {}
    segments: list[Segment] = Field(min_length=2)
    gates: list[int] = []
    onramps: list[Onramp] = []
    offramps: list[Offramp] = []
    mainline_demand: Profile
    ml_schedule: list[Window] | None = None  # None: managed-lane policy always on
    inertia: dict[int, float] = {}  # node id -> lambda
    solver: SolverSettings = SolverSettings()
    calibration: CalibrationSettings = CalibrationSettings()

    @field_validator("schema_version")
    @classmethod
    def _version(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema version {v}; this build reads version {SCHEMA_VERSION}")
        return v

    @model_validator(mode="after")
    def _access(self):
        if self.access == "gated_access":
            if not self.gates:
                raise ValueError("gated_access needs at least one gate")
            if self.ml_schedule is not None:
                raise ValueError("gated managed lanes are always active; remove ml_schedule")
        elif self.gates:
            raise ValueError("gates are only meaningful with gated_access")
        if abs(round(self.interval_s / self.dt_s) * self.dt_s - self.interval_s) > 1e-9:
            raise ValueError("interval_s must be a multiple of dt_s")
        if abs(round(self.output_cadence_s / self.dt_s) * self.dt_s - self.output_cadence_s) > 1e-9:
            raise ValueError("output_cadence_s must be a multiple of dt_s")
        return self


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def _path(loc) -> str:
    out = ""
    for part in loc:
        if isinstance(part, int):
            out += f"[{part}]"
        else:
            out += ("." if out else "") + str(part)
    return out


def _link_hint(data: dict, loc) -> str:
    """Name the links behind a segment or ramp path, if the path points at one."""
    try:
        if loc[0] == "segments" and isinstance(loc[1], int):
            S = len(data.get("segments", []))
            w = len(str(S + 1))
            k = loc[1] + 1
            return f" (links {_rep(k, 1, w)}, {_rep(k, 2, w)})"
        if loc[0] in ("onramps", "offramps") and isinstance(loc[1], int):
            node = data[loc[0]][loc[1]].get("node")
            return f" ({loc[0][:-1]} at node {node})"
    except (IndexError, KeyError, TypeError, AttributeError):
        pass
    return ""


def _format_errors(exc: ValidationError, data) -> list[str]:
    out = []
    for e in exc.errors():
        loc = tuple(x for x in e["loc"] if not (isinstance(x, str) and x.startswith(("function-", "tagged-"))))
        where = _path(loc) or "(top level)"
        msg = e["msg"].removeprefix("Value error, ")
        if e["type"] == "extra_forbidden":
            msg = "unknown field"
        out.append(f"{where}{_link_hint(data, loc) if isinstance(data, dict) else ''}: {msg}")
    return out


def _strip(data, loc):
    cur = data
    for part in loc[:-1]:
        cur = cur[part]
    cur.pop(loc[-1], None)


def _defaults_applied(model: BaseModel, prefix: str = "") -> list[str]:
    out = []
    for name in type(model).model_fields:
        path = f"{prefix}.{name}" if prefix else name
        val = getattr(model, name)
        if name not in model.model_fields_set:
            out.append(path)
            continue
        if isinstance(val, BaseModel):
            out += _defaults_applied(val, path)
        elif isinstance(val, list):
            for i, x in enumerate(val):
                if isinstance(x, BaseModel):
                    out += _defaults_applied(x, f"{path}[{i}]")
    return out


def load_scenario(text: str, *, source: str = "<scenario>", strict: bool = True) -> Scenario:
    """Validate scenario JSON text. Non-strict mode drops unknown fields instead of failing."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError([f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}"]) from None
    if not isinstance(data, dict):
        raise ScenarioError([f"{source}: top level must be an object"])
    for _ in range(100):
        try:
            return Scenario.model_validate(data)
        except ValidationError as exc:
            unknown = [e["loc"] for e in exc.errors() if e["type"] == "extra_forbidden"]
            if strict or not unknown or len(unknown) != len(exc.errors()):
                raise ScenarioError([f"{source}: {m}" for m in _format_errors(exc, data)]) from None
            for loc in unknown:
                _strip(data, loc)
    raise ScenarioError([f"{source}: could not clean unknown fields"])


# ---------------------------------------------------------------------------
# building
# ---------------------------------------------------------------------------


def _merge(kind: str, scenario: Scenario, override: FDParams) -> dict:
    out = dict(KIND_DEFAULTS[kind])
    base = scenario.fd_defaults.get(kind)
    for src in (base, override):
        if src is not None:
            out.update({k: v for k, v in src.model_dump().items() if v is not None})
    out.setdefault("wave_speed_mph", None)
    return out


def _diagram(p: dict, lanes: int, inactive: bool = False) -> FundamentalDiagram:
    cap = p.get("capacity_inactive_vphl", p["capacity_vphl"]) if inactive else p["capacity_vphl"]
    return FundamentalDiagram.from_lane_values(lanes, cap, p["free_flow_mph"], p["jam_density_vpmpl"],
                                               p["wave_speed_mph"])


@dataclass
class ScenarioConfig:
    """A validated scenario with its network, controls and resolved parameters."""

    scenario: Scenario
    network: Network
    controls: Controls
    resolved_fd: dict = field(default_factory=dict)
    defaults_applied: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def horizon_s(self) -> float:
        return self.scenario.horizon_h * 3600.0

    def simulator(self) -> Simulator:
        sc = self.scenario
        return Simulator(
            self.network,
            sc.dt_s,
            self.controls,
            cadence_s=sc.output_cadence_s,
            delay_speed=sc.delay_speed_mph,
            metrics_include_ramps=sc.metrics_include_ramps,
            bisection_tol=sc.solver.bisection_tol,
            bisection_max_iter=sc.solver.bisection_max_iter,
        )

    def resolved(self, seed: int | None = None) -> dict:
        """Echo of the scenario with every default filled in."""
        d = self.scenario.model_dump(mode="json")
        d["resolved_fd"] = self.resolved_fd
        d["defaults_applied"] = list(self.defaults_applied)
        d["seed"] = seed
        return d


def build(scenario: Scenario) -> ScenarioConfig:
    sc = scenario
    gated = sc.access == "gated_access"
    segs, resolved = [], {"segments": [], "onramps": [], "offramps": []}
    for s in sc.segments:
        gp = _merge("gp", sc, s.gp_fd)
        ml = _merge("ml", sc, s.ml_fd)
        segs.append(SegmentSpec(
            length=s.length_mi,
            gp_lanes=s.gp_lanes,
            ml_lanes=s.ml_lanes,
            gp_fd=_diagram(gp, s.gp_lanes),
            ml_fd=_diagram(ml, s.ml_lanes),
            ml_fd_policy_off=None if gated else _diagram(ml, s.ml_lanes, inactive=True),
            sigma=sc.sigma if s.sigma is None else s.sigma,
        ))
        resolved["segments"].append({"gp": gp, "ml": ml})
    ons, offs = [], []
    for r in sc.onramps:
        p = _merge("onramp", sc, r.fd)
        ons.append(RampSpec(r.node, r.lanes, _diagram(p, r.lanes), r.length_mi))
        resolved["onramps"].append(p)
    for r in sc.offramps:
        p = _merge("offramp", sc, r.fd)
        offs.append(RampSpec(r.node, r.lanes, _diagram(p, r.lanes), r.length_mi, r.split, r.assumption))
        resolved["offramps"].append(p)
    try:
        if gated:
            net = build_gated_access(segs, sc.gates, ons, offs, inertia=dict(sc.inertia))
        else:
            net = build_full_access(segs, ons, offs, inertia=dict(sc.inertia))
    except ValueError as exc:
        raise ScenarioError([str(exc)]) from None
    for nid in sc.inertia:
        if nid not in net.nodes:
            raise ScenarioError([f"inertia: node {nid} does not exist"])
    diags = validate(net, sc.dt_s / 3600.0)
    errors = [str(d) for d in diags if d.level == "error"]
    if errors:
        raise ScenarioError(errors)

    n_int = max(1, math.ceil(sc.horizon_h * 3600.0 / sc.interval_s - 1e-9))
    ih = sc.interval_s / 3600.0
    C = net.n_classes
    share = sc.special_share

    def classes(total, ml_part=0.0, gp_only=True):
        arr = np.zeros((n_int, C))
        if gp_only:
            arr[:, 0] = total * (1 - share)
        arr[:, 1] = total * share * ml_part
        return arr

    main = sc.mainline_demand.sample(n_int, ih)
    gp_origin, ml_origin = _origins(net)
    demand = {
        gp_origin: classes(main, 1.0 - sc.special_ml_share),
        ml_origin: classes(main, sc.special_ml_share, gp_only=False),
    }
    for r in sc.onramps:
        lid = next(l for l in net.nodes[r.node].inputs if net.links[l].group is LaneGroup.ONRAMP)
        demand[lid] = classes(r.demand.sample(n_int, ih), 1.0)
    splits = {r.node: r.split_profile.sample(n_int, ih) for r in sc.offramps if r.split_profile is not None}
    schedule = None
    if sc.ml_schedule is not None:
        schedule = [(clock_hours(w.start) * 3600.0, clock_hours(w.end) * 3600.0) for w in sc.ml_schedule]
    controls = Controls(demand=demand, offramp_splits=splits, ml_schedule=schedule, interval_s=sc.interval_s)
    return ScenarioConfig(
        scenario=sc,
        network=net,
        controls=controls,
        resolved_fd=resolved,
        defaults_applied=_defaults_applied(sc),
        warnings=[str(d) for d in diags if d.level != "error"],
    )


def _origins(net: Network) -> tuple[int, int]:
    gp = [l.id for l in net.origins() if l.group is LaneGroup.GP]
    ml = [l.id for l in net.origins() if l.group is LaneGroup.ML]
    return gp[0], ml[0]


def parse_scenario(path: str | Path, *, strict: bool = True) -> ScenarioConfig:
    """Read, validate and build a scenario file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError([f"{path}: {exc.strerror}"]) from None
    sc = load_scenario(text, source=str(path), strict=strict)
    return build(sc)
