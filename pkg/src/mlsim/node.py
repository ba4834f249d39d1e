"""Multi-commodity node model with input priorities and relaxed FIFO.

Outputs are processed bottleneck-first. The most over-demanded output has its
supply shared among inputs by oriented priority; an input that is only
partially served there then has its movements to the other outputs cut back
in proportion to the lane overlap given by the mutual restriction intervals.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

#: Demands and supplies below this many veh/step count as zero.
FLOW_FLOOR = 1e-12


def measure(interval) -> float:
    """Length of a restriction interval; ``None`` stands for the empty set."""
    if interval is None:
        return 0.0
    y, z = interval
    if not 0.0 <= y <= z <= 1.0:
        raise ValueError(f"restriction interval must satisfy 0 <= y <= z <= 1, got {interval}")
    return float(z - y)


@numba.njit(cache=True)
def _share(supply, weights, caps, alloc):
    """Split ``supply`` proportionally to ``weights`` without exceeding ``caps``.

    Caps are filled first by the weighted share; once every positive-weight
    movement is capped any remainder goes to zero-weight movements by demand.
    """
    m = weights.shape[0]
    for i in range(m):
        alloc[i] = 0.0
    open_ = np.zeros(m, dtype=np.bool_)
    for i in range(m):
        open_[i] = caps[i] > FLOW_FLOOR
    rem = supply
    while rem > FLOW_FLOOR:
        wsum = 0.0
        any_open = False
        for i in range(m):
            if open_[i]:
                any_open = True
                wsum += weights[i]
        if not any_open:
            break
        use_caps = wsum <= 0.0
        if use_caps:
            for i in range(m):
                if open_[i]:
                    wsum += caps[i] - alloc[i]
        capped = False
        for i in range(m):
            if open_[i]:
                wi = (caps[i] - alloc[i]) if use_caps else weights[i]
                if alloc[i] + rem * wi / wsum >= caps[i]:
                    capped = True
        if not capped:
            for i in range(m):
                if open_[i]:
                    wi = (caps[i] - alloc[i]) if use_caps else weights[i]
                    alloc[i] += rem * wi / wsum
            rem = 0.0
            break
        for i in range(m):
            if open_[i]:
                wi = (caps[i] - alloc[i]) if use_caps else weights[i]
                if alloc[i] + rem * wi / wsum >= caps[i]:
                    rem -= caps[i] - alloc[i]
                    alloc[i] = caps[i]
                    open_[i] = False
    return rem


@numba.njit(cache=True)
def node_flows(S, R, beta, p, eta):
    """Flows ``f[i, j, c]`` (veh/step) for one node.

    S     (M, C) per-class input demands
    R     (N,)   output supplies
    beta  (M, N, C) fully defined split ratios (negative entries count as 0)
    p     (M,)   input priorities
    eta   (M, N, N) restriction measures, ``eta[i, jr, j]`` for congested ``jr``
    """
    M, C = S.shape
    N = R.shape[0]
    f = np.zeros((M, N, C))
    St = np.zeros((M, N, C))
    Stot = np.zeros(M)
    for i in range(M):
        for c in range(C):
            s = S[i, c]
            if s > FLOW_FLOOR:
                Stot[i] += s
                for j in range(N):
                    b = beta[i, j, c]
                    if b > 0.0:
                        St[i, j, c] = b * s
    Rt = np.empty(N)
    for j in range(N):
        Rt[j] = R[j] if R[j] > FLOW_FLOOR else 0.0
    frozen = np.zeros(N, dtype=np.bool_)
    D = np.zeros(N)
    w = np.zeros(M)
    dem = np.zeros(M)
    alloc = np.zeros(M)
    for _ in range(N + 1):
        jstar = -1
        worst = 1.0
        n_open = 0
        for j in range(N):
            if frozen[j]:
                continue
            n_open += 1
            d = 0.0
            for i in range(M):
                for c in range(C):
                    d += St[i, j, c]
            D[j] = d
            if d > Rt[j] and d > FLOW_FLOOR:
                ratio = np.inf if Rt[j] <= 0.0 else d / Rt[j]
                if ratio > worst:
                    worst = ratio
                    jstar = j
        if n_open == 0:
            break
        if jstar < 0:
            for j in range(N):
                if not frozen[j]:
                    for i in range(M):
                        for c in range(C):
                            f[i, j, c] += St[i, j, c]
            break
        for i in range(M):
            d = 0.0
            for c in range(C):
                d += St[i, jstar, c]
            dem[i] = d
            w[i] = p[i] * d / Stot[i] if Stot[i] > 0.0 else 0.0
        _share(Rt[jstar], w, dem, alloc)
        for i in range(M):
            if dem[i] <= FLOW_FLOOR:
                continue
            phi = alloc[i] / dem[i]
            if phi > 1.0:
                phi = 1.0
            for c in range(C):
                f[i, jstar, c] = St[i, jstar, c] * phi
            cut = 1.0 - phi
            if cut > 0.0:
                for j in range(N):
                    if j != jstar and not frozen[j]:
                        keep = 1.0 - eta[i, jstar, j] * cut
                        for c in range(C):
                            St[i, j, c] *= keep
        frozen[jstar] = True
    return f


@dataclass
class NodeFlowProblem:
    """Inputs to one node solve. ``restrictions`` holds interval measures;
    the default (all ones) is strict FIFO."""

    demands: np.ndarray  # (M, C)
    supplies: np.ndarray  # (N,)
    splits: np.ndarray  # (M, N, C)
    priorities: np.ndarray  # (M,)
    restrictions: np.ndarray | None = None  # (M, N, N)

    def __post_init__(self):
        self.demands = np.atleast_2d(np.asarray(self.demands, dtype=float))
        self.supplies = np.asarray(self.supplies, dtype=float).reshape(-1)
        self.splits = np.asarray(self.splits, dtype=float)
        self.priorities = np.asarray(self.priorities, dtype=float).reshape(-1)
        M, C = self.demands.shape
        N = self.supplies.shape[0]
        if self.splits.shape != (M, N, C):
            raise ValueError(f"splits must have shape {(M, N, C)}, got {self.splits.shape}")
        if self.restrictions is None:
            self.restrictions = np.ones((M, N, N))
        else:
            self.restrictions = np.asarray(self.restrictions, dtype=float)


@dataclass
class NodeFlowSolution:
    flows: np.ndarray  # (M, N, C)
    inflow: np.ndarray = field(init=False)  # per output, all classes

    def __post_init__(self):
        self.inflow = self.flows.sum(axis=(0, 2))


def solve(problem: NodeFlowProblem) -> NodeFlowSolution:
    sp = problem.splits
    if np.isnan(sp).any():
        raise ValueError("undefined split ratios present; complete them with the split-ratio solver first")
    if (problem.demands < 0).any() or (problem.supplies < 0).any():
        raise ValueError("demands and supplies must be nonnegative")
    f = node_flows(problem.demands, problem.supplies, sp, problem.priorities, problem.restrictions)
    return NodeFlowSolution(f)
