"""Network data model: two parallel link chains with ramps, plus builders.

Topology
--------
A freeway with ``S`` segments has chain positions ``0..S``; segment ``s``
spans positions ``s-1 -> s`` and carries one GP link and one managed-lane
link. Interior positions ``1..S-1`` are nodes. The first segment's links are
origins and the last segment's links are destinations. Ramps attach at an
interior node ``k``.

Link ids repeat the (zero-padded) number of the node a link ends at: GP links
use it once, ML links twice, ramps three times. An onramp at node ``k`` is
``rep(k, 3)``; an offramp at node ``k`` is ``rep(k + 1, 3)`` (it ends past
node ``k``) and falls back to four repetitions if that id is taken.

Split tables map ``(input, output, class)`` to a ratio, ``Split.UNDEFINED`` or
``Split.NOT_APPLICABLE``. They are never edited by hand: every node carries
the attributes the table is generated from (policy, crossflow, offramp split
and assumption), so toggling an attribute and regenerating is an involution.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .link import SIGMA_ADVISORY_MAX, FundamentalDiagram


class LaneGroup(str, Enum):
    GP = "gp"
    ML = "ml"
    ONRAMP = "onramp"
    OFFRAMP = "offramp"


class Split(Enum):
    UNDEFINED = "undefined"
    NOT_APPLICABLE = "n/a"


class ClassKind(str, Enum):
    GP_ONLY = "gp_only"
    SPECIAL = "special"
    DESTINATION = "destination"


class Access(str, Enum):
    FULL = "full_access"
    GATED = "gated_access"


@dataclass(frozen=True)
class VehicleClass:
    index: int  # 0-based position in density vectors
    kind: ClassKind
    exit: int | None = None  # 1-based exit number for destination classes

    @property
    def name(self) -> str:
        if self.kind is ClassKind.DESTINATION:
            return f"e{self.exit}"
        return self.kind.value


def make_classes(n_destinations: int = 0) -> tuple[VehicleClass, ...]:
    base = (VehicleClass(0, ClassKind.GP_ONLY), VehicleClass(1, ClassKind.SPECIAL))
    return base + tuple(VehicleClass(2 + k, ClassKind.DESTINATION, k + 1) for k in range(n_destinations))


@dataclass
class Link:
    id: int
    group: LaneGroup
    length: float  # miles
    lanes: int
    fd: FundamentalDiagram
    sigma: float = 0.0
    begin_node: int | None = None
    end_node: int | None = None
    # ML diagram used while the managed-lane policy is off (full access only)
    fd_policy_off: FundamentalDiagram | None = None
    segment: int | None = None  # chain segment for GP and ML links

    @property
    def is_origin(self) -> bool:
        return self.begin_node is None and self.end_node is not None

    @property
    def is_destination(self) -> bool:
        return self.end_node is None and self.begin_node is not None

    @property
    def kind(self) -> str:
        """Topological role: ``origin``, ``destination`` or ``internal``."""
        if self.is_origin:
            return "origin"
        if self.is_destination:
            return "destination"
        return "internal"

    def diagram(self, policy_active: bool = True) -> FundamentalDiagram:
        if not policy_active and self.fd_policy_off is not None:
            return self.fd_policy_off
        return self.fd


Interval = tuple[float, float] | None


@dataclass
class Node:
    id: int
    inputs: tuple[int, ...]
    outputs: tuple[int, ...]
    priorities: tuple[float, ...]
    restrictions: dict[tuple[int, int, int], Interval] = field(default_factory=dict)
    split_table: dict[tuple[int, int, int], float | Split] = field(default_factory=dict)
    is_gate: bool = False
    same_lane_pairs: tuple[tuple[int, int], ...] = ()
    # attributes the split table is generated from
    crossflow: bool = True
    offramp_split: float | None = None
    offramp_assumption: int = 3
    inertia: float | None = None

    def restriction(self, i: int, jr: int, j: int) -> Interval:
        if jr == j:
            return (0.0, 1.0)
        return self.restrictions.get((i, jr, j), (0.0, 1.0))


@dataclass(frozen=True)
class GateSegment:
    """Exits served by one gate: ``exits[k] = (offramp id, upstream GP link x_k)``."""

    gate_node: int
    ml_link: int  # ML link feeding the gate, where switching happens
    exits: tuple[tuple[int, int], ...]


@dataclass
class Network:
    links: dict[int, Link]
    nodes: dict[int, Node]
    classes: tuple[VehicleClass, ...]
    access: Access = Access.FULL
    policy_active: bool = True
    gate_segments: tuple[GateSegment, ...] = ()

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def origins(self) -> list[Link]:
        return [l for l in self.links.values() if l.is_origin]

    def destinations(self) -> list[Link]:
        return [l for l in self.links.values() if l.is_destination]

    def parallel_gp(self, ml_id: int) -> int | None:
        """GP link sharing the ML link's segment."""
        ml = self.links[ml_id]
        for l in self.links.values():
            if l.group is LaneGroup.GP and l.segment is not None and l.segment == ml.segment:
                return l.id
        return None

    def copy(self) -> Network:
        return copy.deepcopy(self)


# ---------------------------------------------------------------------------
# builder inputs
# ---------------------------------------------------------------------------


@dataclass
class SegmentSpec:
    length: float
    gp_lanes: int
    ml_lanes: int
    gp_fd: FundamentalDiagram
    ml_fd: FundamentalDiagram
    ml_fd_policy_off: FundamentalDiagram | None = None
    sigma: float = 0.0


@dataclass
class RampSpec:
    node: int
    lanes: int
    fd: FundamentalDiagram
    length: float = 0.25
    split: float = 0.0  # offramps: default split ratio
    assumption: int = 3  # offramps: which inputs take the exit (1, 2 or 3)


OFFRAMP_ASSUMPTIONS = (1, 2, 3)


def _rep(value: int, times: int, width: int) -> int:
    return int(str(value).zfill(width) * times)


def _ramp_ids(n_segments: int, onramps, offramps) -> tuple[dict[int, int], dict[int, int]]:
    width = len(str(n_segments + 1))
    on_ids = {r.node: _rep(r.node, 3, width) for r in onramps}
    taken = set(on_ids.values())
    off_ids = {}
    for r in offramps:
        rid = _rep(r.node + 1, 3, width)
        if rid in taken:
            rid = _rep(r.node + 1, 4, width)
        off_ids[r.node] = rid
        taken.add(rid)
    return on_ids, off_ids


def _check_ramps(n_segments: int, onramps, offramps) -> None:
    for kind, ramps in (("onramp", onramps), ("offramp", offramps)):
        seen = set()
        for r in ramps:
            if not 1 <= r.node <= n_segments - 1:
                raise ValueError(f"{kind} at node {r.node}: nodes run from 1 to {n_segments - 1}")
            if r.node in seen:
                raise ValueError(f"duplicate {kind} at node {r.node}")
            seen.add(r.node)
            if kind == "offramp":
                if r.assumption not in OFFRAMP_ASSUMPTIONS:
                    raise ValueError(f"offramp at node {r.node}: assumption must be 1, 2 or 3")
                if not 0.0 <= r.split <= 1.0:
                    raise ValueError(f"offramp at node {r.node}: split {r.split} outside [0, 1]")


def _chain_links(segments: list[SegmentSpec], width: int):
    S = len(segments)
    gp, ml = [], []
    for s, seg in enumerate(segments, start=1):
        if seg.length <= 0:
            raise ValueError(f"segment {s}: length must be positive")
        if seg.gp_lanes < 1 or seg.ml_lanes < 1:
            raise ValueError(f"segment {s}: a segment needs at least one GP and one ML lane")
        begin = s - 1 if s > 1 else None
        end = s if s < S else None
        g = Link(_rep(s, 1, width), LaneGroup.GP, seg.length, seg.gp_lanes, seg.gp_fd, 0.0, begin, end, None, s)
        m = Link(
            _rep(s, 2, width), LaneGroup.ML, seg.length, seg.ml_lanes, seg.ml_fd, seg.sigma, begin, end,
            seg.ml_fd_policy_off, s,
        )
        gp.append(g)
        ml.append(m)
    return gp, ml


def _default_priorities(net_links: dict[int, Link], inputs) -> tuple[float, ...]:
    caps = np.array([net_links[i].fd.capacity for i in inputs], dtype=float)
    return tuple(float(x) for x in caps / caps.sum())


def default_restrictions(links: dict[int, Link], inputs, outputs) -> dict[tuple[int, int, int], Interval]:
    """Lane-overlap intervals for a chain node.

    GP traffic heading for the ML queues in the leftmost GP lane, traffic for
    the offramp in the rightmost one; ML traffic heading for the GP queues in
    the rightmost ML lane; onramp traffic merges into the rightmost GP lane.
    """
    role = {}
    for i in inputs:
        role[i] = {LaneGroup.GP: "g", LaneGroup.ML: "m", LaneGroup.ONRAMP: "r"}[links[i].group]
    orole = {}
    for j in outputs:
        orole[j] = {LaneGroup.GP: "G", LaneGroup.ML: "M", LaneGroup.OFFRAMP: "o"}[links[j].group]
    a = next((links[i].lanes for i in inputs if role[i] == "g"), 1)
    b = next((links[i].lanes for i in inputs if role[i] == "m"), 1)
    full = (0.0, 1.0)
    table = {
        "g": {"G": {"M": full, "o": full}, "M": {"G": (0.0, 1.0 / a), "o": None}, "o": {"G": (1.0 - 1.0 / a, 1.0), "M": None}},
        "m": {"G": {"M": (0.0, 1.0 / b), "o": None}, "M": {"G": full, "o": None}, "o": {"G": None, "M": None}},
        "r": {"G": {"M": full, "o": full}, "M": {"G": None, "o": None}, "o": {"G": full, "M": full}},
    }
    out = {}
    for i in inputs:
        for jr in outputs:
            for j in outputs:
                if jr == j:
                    out[(i, jr, j)] = full
                else:
                    out[(i, jr, j)] = table[role[i]][orole[jr]][orole[j]]
    return out


# ---------------------------------------------------------------------------
# split-table generation
# ---------------------------------------------------------------------------


def _exit_coefficient(role: str, assumption: int) -> float:
    if role == "g":
        return 1.0
    if role == "m":
        return 1.0 if assumption in (1, 3) else 0.0
    return 1.0 if assumption == 1 else 0.0


def exit_coefficients(net: Network, node: Node) -> dict[int, float]:
    """Multiplier of the node's offramp split for each input's regular classes."""
    roles = _roles(net, node.inputs)
    return {i: _exit_coefficient(roles[i], node.offramp_assumption) for i in node.inputs}


def _roles(net: Network, ids) -> dict[int, str]:
    names = {LaneGroup.GP: "g", LaneGroup.ML: "m", LaneGroup.ONRAMP: "r"}
    return {i: names[net.links[i].group] for i in ids}


def _out_roles(net: Network, ids) -> dict[int, str]:
    names = {LaneGroup.GP: "G", LaneGroup.ML: "M", LaneGroup.OFFRAMP: "o"}
    return {j: names[net.links[j].group] for j in ids}


def build_split_table(net: Network, node: Node) -> dict[tuple[int, int, int], float | Split]:
    """Regenerate a node's split table from its attributes and the network policy."""
    roles = _roles(net, node.inputs)
    oroles = _out_roles(net, node.outputs)
    off = next((j for j in node.outputs if oroles[j] == "o"), None)
    has_gp_in = any(r == "g" for r in roles.values())
    has_ml_out = any(r == "M" for r in oroles.values())
    table: dict[tuple[int, int, int], float | Split] = {}
    beta = node.offramp_split if node.offramp_split is not None else 0.0
    policy = net.policy_active or net.access is Access.GATED

    # ML-only pass-through node of a gated network
    if not has_gp_in:
        for i in node.inputs:
            for j in node.outputs:
                for cl in net.classes:
                    c = cl.index
                    table[(i, j, c)] = 1.0 if cl.kind is ClassKind.SPECIAL else Split.NOT_APPLICABLE
        return table

    for i in node.inputs:
        role = roles[i]
        coef = _exit_coefficient(role, node.offramp_assumption)
        row_has_exit = off is not None and coef > 0.0
        for cl in net.classes:
            c = cl.index
            if cl.kind is ClassKind.DESTINATION:
                continue
            for j in node.outputs:
                orole = oroles[j]
                if orole == "o":
                    table[(i, j, c)] = coef * beta
                    continue
                through = (role in "gr" and orole == "G") or (role == "m" and orole == "M")
                if not node.crossflow and has_ml_out:
                    # residual GP-only vehicles on the ML keep draining along it
                    if through:
                        table[(i, j, c)] = Split.UNDEFINED if row_has_exit else 1.0
                    else:
                        table[(i, j, c)] = 0.0
                    continue
                barred = cl.kind is ClassKind.GP_ONLY and policy and orole == "M"
                table[(i, j, c)] = Split.NOT_APPLICABLE if barred else Split.UNDEFINED

    # destination classes: only the routing constants, everything else open
    for cl in net.classes:
        if cl.kind is not ClassKind.DESTINATION:
            continue
        c = cl.index
        for i in node.inputs:
            for j in node.outputs:
                table[(i, j, c)] = Split.UNDEFINED
    for seg in net.gate_segments:
        if seg.gate_node == node.id:
            x1 = next(j for j in node.outputs if oroles[j] == "G")
            for cl in net.classes:
                if cl.kind is ClassKind.DESTINATION:
                    table[(seg.ml_link, x1, cl.index)] = 1.0
        for k, (exit_id, x_k) in enumerate(seg.exits):
            if exit_id in node.outputs:
                for cl in net.classes:
                    if cl.kind is ClassKind.DESTINATION:
                        table[(x_k, exit_id, cl.index)] = 1.0 if cl.exit == k + 1 else 0.0
    return table


def refresh_tables(net: Network) -> Network:
    for node in net.nodes.values():
        node.split_table = build_split_table(net, node)
    return net


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def build_full_access(
    segments: list[SegmentSpec],
    onramps: list[RampSpec] = (),
    offramps: list[RampSpec] = (),
    inertia: dict[int, float] | None = None,
) -> Network:
    """Two chains meeting at every interior node; crossflow allowed everywhere."""
    S = len(segments)
    if S < 2:
        raise ValueError("at least two segments are needed (one interior node)")
    _check_ramps(S, onramps, offramps)
    width = len(str(S + 1))
    gp, ml = _chain_links(segments, width)
    links = {l.id: l for l in gp + ml}
    on_ids, off_ids = _ramp_ids(S, onramps, offramps)
    for r in onramps:
        links[on_ids[r.node]] = Link(on_ids[r.node], LaneGroup.ONRAMP, r.length, r.lanes, r.fd, 0.0, None, r.node)
    for r in offramps:
        links[off_ids[r.node]] = Link(off_ids[r.node], LaneGroup.OFFRAMP, r.length, r.lanes, r.fd, 0.0, r.node, None)
    if len(links) != len(gp) + len(ml) + len(onramps) + len(offramps):
        raise ValueError("duplicate link ids")
    off_by_node = {r.node: r for r in offramps}
    nodes = {}
    for k in range(1, S):
        ins = [gp[k - 1].id, ml[k - 1].id] + ([on_ids[k]] if k in on_ids else [])
        outs = [gp[k].id, ml[k].id] + ([off_ids[k]] if k in off_ids else [])
        r = off_by_node.get(k)
        nodes[k] = Node(
            id=k,
            inputs=tuple(ins),
            outputs=tuple(outs),
            priorities=_default_priorities(links, ins),
            restrictions=default_restrictions(links, ins, outs),
            is_gate=False,
            same_lane_pairs=((gp[k - 1].id, gp[k].id), (ml[k - 1].id, ml[k].id)),
            crossflow=True,
            offramp_split=r.split if r else None,
            offramp_assumption=r.assumption if r else 3,
            inertia=(inertia or {}).get(k),
        )
    net = Network(links, nodes, make_classes(0), Access.FULL, True, ())
    return refresh_tables(net)


def ml_node_id(k: int, n_segments: int) -> int:
    """Id of the ML pass-through node at chain position ``k`` (gated networks)."""
    return _rep(k, 2, len(str(n_segments + 1)))


def build_gated_access(
    segments: list[SegmentSpec],
    gate_positions: list[int],
    onramps: list[RampSpec] = (),
    offramps: list[RampSpec] = (),
    inertia: dict[int, float] | None = None,
) -> Network:
    """Chains meeting only at gates; ML traffic is routed to exits by destination classes."""
    S = len(segments)
    if S < 2:
        raise ValueError("at least two segments are needed (one interior node)")
    gates = sorted(set(gate_positions))
    if not gates:
        raise ValueError("gated access needs at least one gate")
    for g in gates:
        if not 1 <= g <= S - 1:
            raise ValueError(f"gate at node {g}: nodes run from 1 to {S - 1}")
    _check_ramps(S, onramps, offramps)
    for r in offramps:
        if r.node in gates:
            raise ValueError(f"offramp at gate node {r.node}: gates are modeled without ramps to exit")
        if r.node < gates[0]:
            raise ValueError(f"offramp at node {r.node} lies upstream of the first gate and belongs to no gate segment")
    width = len(str(S + 1))
    gp, ml = _chain_links(segments, width)
    links = {l.id: l for l in gp + ml}
    on_ids, off_ids = _ramp_ids(S, onramps, offramps)
    for r in onramps:
        links[on_ids[r.node]] = Link(on_ids[r.node], LaneGroup.ONRAMP, r.length, r.lanes, r.fd, 0.0, None, r.node)
    for r in offramps:
        links[off_ids[r.node]] = Link(off_ids[r.node], LaneGroup.OFFRAMP, r.length, r.lanes, r.fd, 0.0, r.node, None)
    # non-gate ML links attach to ML pass-through nodes
    for k in range(1, S):
        if k in gates:
            continue
        mid = ml_node_id(k, S)
        links[ml[k - 1].id].end_node = mid
        links[ml[k].id].begin_node = mid
    off_by_node = {r.node: r for r in offramps}
    segs = []
    for gi, g in enumerate(gates):
        nxt = gates[gi + 1] if gi + 1 < len(gates) else S
        exits = tuple((off_ids[k], gp[k - 1].id) for k in sorted(off_by_node) if g < k < nxt)
        segs.append(GateSegment(g, ml[g - 1].id, exits))
    K = max((len(s.exits) for s in segs), default=0)
    nodes = {}
    for k in range(1, S):
        gate = k in gates
        ins = [gp[k - 1].id] + ([ml[k - 1].id] if gate else []) + ([on_ids[k]] if k in on_ids else [])
        outs = [gp[k].id] + ([ml[k].id] if gate else []) + ([off_ids[k]] if k in off_ids else [])
        r = off_by_node.get(k)
        nodes[k] = Node(
            id=k,
            inputs=tuple(ins),
            outputs=tuple(outs),
            priorities=_default_priorities(links, ins),
            restrictions=default_restrictions(links, ins, outs),
            is_gate=gate,
            same_lane_pairs=((gp[k - 1].id, gp[k].id), (ml[k - 1].id, ml[k].id)) if gate else (),
            crossflow=gate,
            offramp_split=r.split if r else None,
            offramp_assumption=2 if r else 3,
            inertia=(inertia or {}).get(k) if gate else None,
        )
        if not gate:
            mid = ml_node_id(k, S)
            nodes[mid] = Node(
                id=mid,
                inputs=(ml[k - 1].id,),
                outputs=(ml[k].id,),
                priorities=(1.0,),
                restrictions={},
                crossflow=False,
            )
    net = Network(links, nodes, make_classes(K), Access.GATED, True, tuple(segs))
    return refresh_tables(net)


# ---------------------------------------------------------------------------
# updates (return modified copies)
# ---------------------------------------------------------------------------


def _is_chain_meeting(net: Network, node: Node) -> bool:
    groups_in = {net.links[i].group for i in node.inputs}
    groups_out = {net.links[j].group for j in node.outputs}
    return {LaneGroup.GP, LaneGroup.ML} <= groups_in and {LaneGroup.GP, LaneGroup.ML} <= groups_out


def disable_gate(net: Network, node_id: int) -> Network:
    """Forbid GP/ML exchange at a chain-meeting node."""
    out = net.copy()
    node = out.nodes[node_id]
    if not _is_chain_meeting(out, node):
        raise ValueError(f"node {node_id} is not a node where the GP and ML chains meet")
    node.crossflow = False
    node.split_table = build_split_table(out, node)
    return out


def enable_gate(net: Network, node_id: int) -> Network:
    out = net.copy()
    node = out.nodes[node_id]
    if not _is_chain_meeting(out, node):
        raise ValueError(f"node {node_id} is not a node where the GP and ML chains meet")
    node.crossflow = True
    node.split_table = build_split_table(out, node)
    return out


def set_managed_policy(net: Network, active: bool) -> Network:
    """Switch the GP-only ban on managed lanes (and the ML capacity with it)."""
    if net.access is Access.GATED:
        raise ValueError("gated managed lanes are always active")
    out = net.copy()
    out.policy_active = bool(active)
    return refresh_tables(out)


def set_offramp_split(net: Network, node_id: int, beta: float) -> Network:
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"split {beta} outside [0, 1]")
    out = net.copy()
    node = out.nodes[node_id]
    if node.offramp_split is None:
        raise ValueError(f"node {node_id} has no offramp")
    node.offramp_split = float(beta)
    node.split_table = build_split_table(out, node)
    return out


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Diagnostic:
    level: str  # "error" or "warning"
    code: str
    message: str

    def __str__(self) -> str:
        return f"{self.level}: {self.message}"


def validate(net: Network, dt: float) -> list[Diagnostic]:
    """Problems with ``net`` at time step ``dt`` (hours); empty means valid."""
    diags: list[Diagnostic] = []

    def err(code, msg):
        diags.append(Diagnostic("error", code, msg))

    if not net.origins():
        err("no-origins", "no origin links")
    if not net.destinations():
        err("no-destinations", "no destination links")
    for l in net.links.values():
        if not l.length > 0:
            err("length", f"link {l.id}: length must be positive")
        if l.lanes < 1:
            err("lanes", f"link {l.id}: at least one lane required")
        for fd in filter(None, (l.fd, l.fd_policy_off)):
            try:
                fd.check()
            except ValueError as exc:
                err("fd", f"link {l.id}: {exc}")
            if fd.free_flow_speed * dt > l.length:
                err("cfl", f"link {l.id}: free-flow speed covers {fd.free_flow_speed * dt:.4g} mi per step, "
                    f"longer than the link ({l.length:.4g} mi)")
            if fd.congestion_wave_speed * dt > l.length:
                err("cfl", f"link {l.id}: congestion wave covers {fd.congestion_wave_speed * dt:.4g} mi per step, "
                    f"longer than the link ({l.length:.4g} mi)")
        if l.group is not LaneGroup.ML and l.sigma != 0:
            err("sigma", f"link {l.id}: only managed-lane links carry a friction coefficient")
        if not 0 <= l.sigma <= 1:
            err("sigma", f"link {l.id}: friction coefficient {l.sigma} outside [0, 1]")
        elif l.sigma > SIGMA_ADVISORY_MAX:
            diags.append(Diagnostic("warning", "sigma", f"link {l.id}: friction coefficient {l.sigma} exceeds {SIGMA_ADVISORY_MAX}"))
        if l.begin_node is None and l.end_node is None:
            err("orphan", f"link {l.id} is attached to no node")
        for end, nid in (("begin", l.begin_node), ("end", l.end_node)):
            if nid is not None and nid not in net.nodes:
                err("graph", f"link {l.id}: {end} node {nid} does not exist")
    used = set()
    for node in net.nodes.values():
        for i in node.inputs:
            used.add(i)
            if i not in net.links:
                err("graph", f"node {node.id}: input link {i} does not exist")
            elif net.links[i].end_node != node.id:
                err("graph", f"node {node.id}: input link {i} does not end here")
        for j in node.outputs:
            used.add(j)
            if j not in net.links:
                err("graph", f"node {node.id}: output link {j} does not exist")
            elif net.links[j].begin_node != node.id:
                err("graph", f"node {node.id}: output link {j} does not begin here")
        p = np.asarray(node.priorities, dtype=float)
        if p.shape[0] != len(node.inputs) or (p < 0).any() or abs(p.sum() - 1.0) > 1e-12:
            err("priorities", f"node {node.id}: priorities must be nonnegative, one per input, summing to 1")
        for (i, jr, j), iv in node.restrictions.items():
            if iv is not None and not 0.0 <= iv[0] <= iv[1] <= 1.0:
                err("restriction", f"node {node.id}: restriction interval {iv} for ({i}, {jr}, {j}) invalid")
        for i in node.inputs:
            for c in range(net.n_classes):
                vals = [node.split_table.get((i, j, c), Split.UNDEFINED) for j in node.outputs]
                known = [v for v in vals if isinstance(v, float) or isinstance(v, int)]
                s = float(sum(known))
                if any(not 0.0 <= v <= 1.0 for v in known):
                    err("split", f"node {node.id}: split ratio outside [0, 1] for input {i}, class {c}")
                if Split.UNDEFINED in vals:
                    if s > 1.0 + 1e-9:
                        err("split", f"node {node.id}: defined splits of input {i}, class {c} sum to {s:.6g} > 1")
                elif known and abs(s - 1.0) > 1e-9:
                    err("split", f"node {node.id}: splits of input {i}, class {c} sum to {s:.6g}, expected 1")
    for l in net.links.values():
        if l.id not in used and (l.begin_node is not None or l.end_node is not None):
            err("orphan", f"link {l.id} is not connected to its node")
    return diags


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _fd_dict(fd: FundamentalDiagram | None):
    if fd is None:
        return None
    return {
        "capacity": fd.capacity,
        "free_flow_speed": fd.free_flow_speed,
        "congestion_wave_speed": fd.congestion_wave_speed,
        "jam_density": fd.jam_density,
    }


def _split_out(v):
    return v.value if isinstance(v, Split) else float(v)


def _split_in(v):
    return Split(v) if isinstance(v, str) else float(v)


def to_dict(net: Network) -> dict:
    return {
        "access": net.access.value,
        "policy_active": net.policy_active,
        "classes": [{"index": c.index, "kind": c.kind.value, "exit": c.exit} for c in net.classes],
        "links": [
            {
                "id": l.id,
                "group": l.group.value,
                "length": l.length,
                "lanes": l.lanes,
                "fd": _fd_dict(l.fd),
                "fd_policy_off": _fd_dict(l.fd_policy_off),
                "sigma": l.sigma,
                "begin_node": l.begin_node,
                "end_node": l.end_node,
                "segment": l.segment,
            }
            for l in sorted(net.links.values(), key=lambda l: l.id)
        ],
        "nodes": [
            {
                "id": n.id,
                "inputs": list(n.inputs),
                "outputs": list(n.outputs),
                "priorities": list(n.priorities),
                "restrictions": [[i, jr, j, None if iv is None else list(iv)] for (i, jr, j), iv in n.restrictions.items()],
                "split_table": [[i, j, c, _split_out(v)] for (i, j, c), v in n.split_table.items()],
                "is_gate": n.is_gate,
                "same_lane_pairs": [list(p) for p in n.same_lane_pairs],
                "crossflow": n.crossflow,
                "offramp_split": n.offramp_split,
                "offramp_assumption": n.offramp_assumption,
                "inertia": n.inertia,
            }
            for n in sorted(net.nodes.values(), key=lambda n: n.id)
        ],
        "gate_segments": [
            {"gate_node": g.gate_node, "ml_link": g.ml_link, "exits": [list(e) for e in g.exits]}
            for g in net.gate_segments
        ],
    }


def from_dict(d: dict) -> Network:
    def fd(x):
        return None if x is None else FundamentalDiagram(**x)

    links = {}
    for x in d["links"]:
        l = Link(
            x["id"], LaneGroup(x["group"]), x["length"], x["lanes"], fd(x["fd"]), x["sigma"],
            x["begin_node"], x["end_node"], fd(x["fd_policy_off"]), x.get("segment"),
        )
        links[l.id] = l
    nodes = {}
    for x in d["nodes"]:
        nodes[x["id"]] = Node(
            id=x["id"],
            inputs=tuple(x["inputs"]),
            outputs=tuple(x["outputs"]),
            priorities=tuple(x["priorities"]),
            restrictions={(i, jr, j): None if iv is None else tuple(iv) for i, jr, j, iv in x["restrictions"]},
            split_table={(i, j, c): _split_in(v) for i, j, c, v in x["split_table"]},
            is_gate=x["is_gate"],
            same_lane_pairs=tuple(tuple(p) for p in x["same_lane_pairs"]),
            crossflow=x["crossflow"],
            offramp_split=x["offramp_split"],
            offramp_assumption=x["offramp_assumption"],
            inertia=x["inertia"],
        )
    classes = tuple(VehicleClass(c["index"], ClassKind(c["kind"]), c["exit"]) for c in d["classes"])
    segs = tuple(GateSegment(g["gate_node"], g["ml_link"], tuple(tuple(e) for e in g["exits"])) for g in d["gate_segments"])
    return Network(links, nodes, classes, Access(d["access"]), d["policy_active"], segs)


def networks_equal(a: Network, b: Network) -> bool:
    return to_dict(a) == to_dict(b)
