"""Backwards-lambda link model with congestion metastate and friction adjustment.

Units follow one convention everywhere below the config layer: densities are
veh/mile (summed over lanes), flows are veh/step, and the fundamental diagram
enters the kernels already multiplied by the time step (``v*dt`` in
miles/step, ``F*dt`` in veh/step, ``w*dt`` in miles/step).
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

#: Default ratio of congestion-wave speed to free-flow speed.
WAVE_SPEED_RATIO = 0.2
#: Friction coefficients above this value trigger a validation warning.
SIGMA_ADVISORY_MAX = 0.4
# relative slack when comparing speeds that should be equal in free flow
_SPEED_RTOL = 1e-9
# A link fed at exactly its capacity approaches the high critical density from
# below and never crosses it in exact arithmetic; rounding must not flip it.
DENSITY_RTOL = 1e-9


@dataclass(frozen=True)
class FundamentalDiagram:
    """Link-level diagram (all lanes together).

    capacity          veh/h
    free_flow_speed   mph
    congestion_wave_speed  mph
    jam_density       veh/mi
    """

    capacity: float
    free_flow_speed: float
    congestion_wave_speed: float
    jam_density: float

    @classmethod
    def from_lane_values(
        cls,
        lanes: int,
        capacity_vphl: float,
        free_flow_speed: float,
        jam_density_vpmpl: float,
        congestion_wave_speed: float | None = None,
    ) -> FundamentalDiagram:
        if congestion_wave_speed is None:
            congestion_wave_speed = free_flow_speed * WAVE_SPEED_RATIO
        return cls(
            capacity=capacity_vphl * lanes,
            free_flow_speed=free_flow_speed,
            congestion_wave_speed=congestion_wave_speed,
            jam_density=jam_density_vpmpl * lanes,
        )

    @property
    def low_critical_density(self) -> float:
        w, v = self.congestion_wave_speed, self.free_flow_speed
        return w * self.jam_density / (v + w)

    @property
    def high_critical_density(self) -> float:
        return self.capacity / self.free_flow_speed

    @property
    def is_triangular(self) -> bool:
        return np.isclose(self.low_critical_density, self.high_critical_density, rtol=1e-12, atol=0.0)

    def check(self) -> None:
        """Raise ``ValueError`` unless F, v, w, n_J > 0 and n- <= n+ < n_J."""
        for name in ("capacity", "free_flow_speed", "congestion_wave_speed", "jam_density"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        lo, hi = self.low_critical_density, self.high_critical_density
        if lo > hi * (1 + 1e-12):
            raise ValueError(
                f"low critical density {lo:.4g} exceeds high critical density {hi:.4g}; "
                "lower the jam density or raise the capacity"
            )
        if not hi < self.jam_density:
            raise ValueError(f"high critical density {hi:.4g} must be below jam density {self.jam_density:.4g}")

    def with_capacity(self, capacity: float) -> FundamentalDiagram:
        return FundamentalDiagram(capacity, self.free_flow_speed, self.congestion_wave_speed, self.jam_density)


@dataclass
class LinkState:
    densities: np.ndarray  # veh/mi per class
    theta: int = 0

    def __post_init__(self):
        self.densities = np.asarray(self.densities, dtype=float)

    @property
    def total(self) -> float:
        return float(self.densities.sum())


@dataclass(frozen=True)
class FrictionAdjustment:
    active: bool
    free_flow_speed: float  # adjusted, mph
    capacity: float  # adjusted, veh/h
    delta: float  # speed differential, mph


# ---------------------------------------------------------------------------
# kernels (per-step units)
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def sending(n, v, F, out):
    """Per-class demand ``v n^c min(1, F / (v sum n))`` written into ``out``."""
    tot = 0.0
    for c in range(n.shape[0]):
        tot += n[c]
    if tot <= 0.0:
        for c in range(n.shape[0]):
            out[c] = 0.0
        return
    scale = 1.0
    if v * tot > F:
        scale = F / (v * tot)
    for c in range(n.shape[0]):
        out[c] = v * n[c] * scale


@numba.njit(cache=True)
def receiving(total, theta, F, w, nJ):
    r = (1 - theta) * F + theta * w * (nJ - total)
    if r < 0.0:
        return 0.0
    return r


@numba.njit(cache=True)
def metastate(total, theta_prev, n_low, n_high):
    if total <= n_low:
        return 0
    if total > n_high * (1.0 + DENSITY_RTOL):
        return 1
    return theta_prev


@numba.njit(cache=True)
def friction_kernel(sigma, v_ml_f, n_high, total, v_gp_prev, v_gp_f, v_ml_prev):
    """Return (active, v_hat, F_hat, delta) in the speed unit of the inputs.

    ``n_high`` is the unadjusted high critical density of the managed-lane link.
    """
    if sigma <= 0.0:
        return False, v_ml_f, v_ml_f * n_high, 0.0
    bound = min(v_gp_f, v_ml_prev)
    if not v_gp_prev < bound * (1.0 - _SPEED_RTOL):
        return False, v_ml_f, v_ml_f * n_high, 0.0
    delta = v_ml_f - v_gp_prev
    v_hat = v_ml_f - sigma * delta
    F_hat = v_hat * n_high
    # implied speed must stay at or above the GP speed
    # density threshold F_hat / (v_f - delta), multiplied out so a stopped GP link
    # (infinite threshold) needs no special case
    if not total * (v_ml_f - delta) < F_hat:
        return False, v_ml_f, v_ml_f * n_high, 0.0
    return True, v_hat, F_hat, delta


# ---------------------------------------------------------------------------
# public API (config units in, per-step results out)
# ---------------------------------------------------------------------------


def demand(fd: FundamentalDiagram, state: LinkState, dt: float) -> np.ndarray:
    """Per-class demand in veh/step for a step of ``dt`` hours."""
    out = np.empty_like(state.densities)
    sending(state.densities, fd.free_flow_speed * dt, fd.capacity * dt, out)
    return out


def supply(fd: FundamentalDiagram, state: LinkState, dt: float) -> float:
    """Receiving capacity in veh/step; ``theta`` selects the branch."""
    return receiving(
        state.total, state.theta, fd.capacity * dt, fd.congestion_wave_speed * dt, fd.jam_density
    )


def update_metastate(fd: FundamentalDiagram, state: LinkState) -> int:
    return int(metastate(state.total, state.theta, fd.low_critical_density, fd.high_critical_density))


def speed(state: LinkState, outflows, free_flow_speed: float, dt: float) -> float:
    """Space-mean speed (mph) from the realized outflow of a step.

    ``outflows`` holds veh/step leaving the link (any shape; it is summed).
    An empty link moves at free-flow speed.
    """
    tot = state.total
    if tot <= 0.0:
        return free_flow_speed
    return float(np.sum(outflows)) / tot / dt


def friction_adjust(
    ml_fd: FundamentalDiagram,
    sigma: float,
    gp_speed_prev: float,
    ml_speed_prev: float,
    ml_state: LinkState,
    gp_free_flow_speed: float,
) -> FrictionAdjustment:
    """Friction on a managed-lane link given last step's GP and ML speeds (mph)."""
    if not 0.0 <= sigma <= 1.0:
        raise ValueError(f"friction coefficient must lie in [0, 1], got {sigma}")
    active, v_hat, F_hat, delta = friction_kernel(
        sigma,
        ml_fd.free_flow_speed,
        ml_fd.high_critical_density,
        ml_state.total,
        gp_speed_prev,
        gp_free_flow_speed,
        ml_speed_prev,
    )
    if not active:
        return FrictionAdjustment(False, ml_fd.free_flow_speed, ml_fd.capacity, 0.0)
    return FrictionAdjustment(True, v_hat, F_hat, delta)


def adjusted_demand(
    fd: FundamentalDiagram, adj: FrictionAdjustment, state: LinkState, dt: float
) -> np.ndarray:
    """Demand using the friction-adjusted free-flow speed and capacity."""
    out = np.empty_like(state.densities)
    sending(state.densities, adj.free_flow_speed * dt, adj.capacity * dt, out)
    return out
