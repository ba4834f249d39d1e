"""Destination-class switching on the managed-lane link feeding a gate.

Class layout: index 0 is GP-only traffic, 1 is special traffic, and
``2 + k`` holds vehicles bound for the k-th offramp after the gate.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .link import LinkState

GP_ONLY = 0
SPECIAL = 1
FIRST_DESTINATION = 2


@numba.njit(cache=True)
def switch_classes(n, v, beta_gp, beta_special):
    """In-place ascending-k reassignment of ``n`` toward exits.

    ``beta_gp[k]`` and ``beta_special[k]`` are the exit-k offramp splits of the
    GP-only and special classes. For densities, ``v`` is the fraction of the
    link leaving per step; the engine applies it to the per-step class demand
    at the gate with ``v = 1``, so destination classes never sit on a managed
    lane.
    """
    for k in range(beta_gp.shape[0]):
        m1 = beta_gp[k] * v * n[GP_ONLY]
        m2 = beta_special[k] * v * n[SPECIAL]
        n[FIRST_DESTINATION + k] += m1 + m2
        n[GP_ONLY] -= m1
        n[SPECIAL] -= m2


@dataclass(frozen=True)
class GateContext:
    ml_link: object
    outflow_fraction: float  # share of the link that leaves per step, in [0, 1]
    beta_gp: tuple[float, ...]  # per exit, zero-padded to K
    beta_special: tuple[float, ...]

    def __post_init__(self):
        if not 0.0 <= self.outflow_fraction <= 1.0:
            raise ValueError(f"outflow fraction must lie in [0, 1], got {self.outflow_fraction}")
        if len(self.beta_gp) != len(self.beta_special):
            raise ValueError("per-exit split lists must have equal length")
        for b in (*self.beta_gp, *self.beta_special):
            if not 0.0 <= b <= 1.0:
                raise ValueError(f"split ratio {b} outside [0, 1]")


def assign_destinations(state: LinkState, ctx: GateContext) -> LinkState:
    K = len(ctx.beta_gp)
    n = state.densities.astype(float).copy()
    if n.shape[0] < FIRST_DESTINATION + K:
        raise ValueError(f"state has {n.shape[0]} classes, need {FIRST_DESTINATION + K}")
    switch_classes(
        n,
        ctx.outflow_fraction,
        np.asarray(ctx.beta_gp, dtype=float),
        np.asarray(ctx.beta_special, dtype=float),
    )
    return LinkState(n, state.theta)
