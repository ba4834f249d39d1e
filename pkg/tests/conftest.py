from __future__ import annotations

import numpy as np
import pytest

from mlsim.engine import Controls, Simulator
from mlsim.link import FundamentalDiagram
from mlsim.network import RampSpec, SegmentSpec, build_full_access, build_gated_access

DT_S = 5.0


def gp_fd(lanes: int = 3) -> FundamentalDiagram:
    return FundamentalDiagram.from_lane_values(lanes, 1900, 65, 150)


def ml_fd(lanes: int = 1, capacity: float = 1800) -> FundamentalDiagram:
    return FundamentalDiagram.from_lane_values(lanes, capacity, 70, 150)


def ramp_fd() -> FundamentalDiagram:
    return FundamentalDiagram.from_lane_values(1, 1900, 65, 150)


def segments(n: int, length: float = 0.5, sigma: float = 0.0, gp_lanes: int = 3, inactive: bool = False):
    return [
        SegmentSpec(length, gp_lanes, 1, gp_fd(gp_lanes), ml_fd(), ml_fd(capacity=1900) if inactive else None, sigma)
        for _ in range(n)
    ]


def full_access(n_seg=4, onramps=(1,), offramps=(2,), split=0.1, sigma=0.0, **kw):
    return build_full_access(
        segments(n_seg, sigma=sigma, **kw),
        [RampSpec(k, 1, ramp_fd()) for k in onramps],
        [RampSpec(k, 1, ramp_fd(), split=split) for k in offramps],
    )


def gated(n_seg=8, gates=(1, 4), onramps=(1, 5), offramps=((2, 0.1), (3, 0.2), (6, 0.1)), sigma=0.0):
    return build_gated_access(
        segments(n_seg, sigma=sigma),
        list(gates),
        [RampSpec(k, 1, ramp_fd()) for k in onramps],
        [RampSpec(k, 1, ramp_fd(), split=b) for k, b in offramps],
    )


def mainline_demand(net, total_vph, share=0.15, ml_share=0.5, n_int=1):
    """Origin demand dict with the class layout used by scenario files."""
    C = net.n_classes
    gp = next(l.id for l in net.origins() if l.group.value == "gp")
    ml = next(l.id for l in net.origins() if l.group.value == "ml")
    d_gp = np.zeros((n_int, C))
    d_ml = np.zeros((n_int, C))
    d_gp[:, 0] = total_vph * (1 - share)
    d_gp[:, 1] = total_vph * share * (1 - ml_share)
    d_ml[:, 1] = total_vph * share * ml_share
    return {gp: d_gp, ml: d_ml}


def ramp_demand(net, node, vph, share=0.15, n_int=1):
    lid = next(l for l in net.nodes[node].inputs if net.links[l].group.value == "onramp")
    d = np.zeros((n_int, net.n_classes))
    d[:, 0] = vph * (1 - share)
    d[:, 1] = vph * share
    return {lid: d}


def simulate(net, demand, horizon_s=3600.0, **kw):
    controls = Controls(demand=demand, **{k: kw.pop(k) for k in ("offramp_splits", "ml_schedule") if k in kw})
    sim = Simulator(net, DT_S, controls, **kw)
    return sim, sim.run(horizon_s)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
