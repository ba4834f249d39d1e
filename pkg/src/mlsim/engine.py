"""Time stepping of a compiled network.

Each step runs, in order: metastate update, friction adjustment on managed
lanes, demands and supplies, destination-class switching of gate demand,
split completion, node flows, boundary flows and the density update. The network is
flattened into arrays once; a numba kernel advances a block of steps between
control updates (demand intervals, policy switches, output cadence).
"""
from __future__ import annotations

from collections import namedtuple
from dataclasses import dataclass, field

import numba
import numpy as np

from .bisection import N_REGULAR, bisect_split, offramp_inflow
from .gates import FIRST_DESTINATION, switch_classes
from .link import friction_kernel, metastate, receiving, sending
from .network import Access, LaneGroup, Network, Split, build_split_table, exit_coefficients
from .node import FLOW_FLOOR, node_flows
from .splits import MAX_ITER, NOT_APPLICABLE, complete_splits, regularize

OK = 0
ERR_NO_ROUTE = 1  # positive demand in a row with no admissible output
ERR_CONFINEMENT = 2  # a class showed up where it must not be
ERR_NEGATIVE = 3  # density went negative beyond tolerance (time step too long)

ERROR_TEXT = {
    ERR_NO_ROUTE: "positive demand in a split row with no applicable output",
    ERR_CONFINEMENT: "vehicle class present on a link it is confined away from",
    ERR_NEGATIVE: "density went negative beyond tolerance; check the CFL condition",
}

NEG_TOL = 1e-9
CONFINE_TOL = 1e-9
ROW_TOL = 1e-9

CALIB_OFF = 0
CALIB_RECORD = 1  # accumulate demand-weighted completed splits
CALIB_BISECT = 2  # bisect offramp splits against targets at flagged nodes


Arrays = namedtuple(
    "Arrays",
    [
        "L", "lanes", "vf", "vdt", "wdt", "nJ", "n_low", "Fdt_on", "Fdt_off", "nhi_on", "nhi_off",
        "sigma", "gp_of", "is_ml", "is_origin", "is_dest", "confine",
        "n_in", "n_out", "in_idx", "out_idx", "p", "p_reg", "eta", "same_lane", "lam", "off_col", "coef",
        "gate_ml", "gate_exit_node",
    ],
)


class SimulationError(RuntimeError):
    pass


@dataclass
class CompiledNetwork:
    net: Network
    dt: float  # hours
    arrays: Arrays
    link_ids: list[int]
    node_ids: list[int]
    link_index: dict[int, int]
    node_index: dict[int, int]
    beta_on: np.ndarray  # (NN, MAXM, MAXN, C) encoded, policy active
    beta_off: np.ndarray  # policy inactive
    offramp_nodes: list[int]  # node ids with an offramp
    offramp_of_node: dict[int, int]  # node id -> offramp link id

    @property
    def n_links(self) -> int:
        return len(self.link_ids)

    @property
    def n_classes(self) -> int:
        return self.net.n_classes


def _encode(v) -> float:
    if v is Split.UNDEFINED:
        return np.nan
    if v is Split.NOT_APPLICABLE:
        return NOT_APPLICABLE
    return float(v)


def _tables(net: Network, node, policy: bool) -> dict:
    if net.access is Access.GATED or net.policy_active == policy:
        return node.split_table
    other = net.copy()
    other.policy_active = policy
    return build_split_table(other, other.nodes[node.id])


def confinement_mask(net: Network) -> np.ndarray:
    """Boolean (links, classes) array: True where a class may be present."""
    ids = sorted(net.links)
    idx = {l: k for k, l in enumerate(ids)}
    C = net.n_classes
    mask = np.ones((len(ids), C), dtype=np.bool_)
    if net.access is not Access.GATED:
        return mask
    for k, l in enumerate(ids):
        if net.links[l].group is LaneGroup.ML:
            mask[k, 0] = False
    mask[:, 2:] = False
    by_end = {}
    for l in net.links.values():
        if l.group is LaneGroup.GP and l.end_node is not None:
            by_end[l.end_node] = l.id
    for seg in net.gate_segments:
        gate = net.nodes[seg.gate_node]
        x1 = next(j for j in gate.outputs if net.links[j].group is LaneGroup.GP)
        for k, (exit_id, x_k) in enumerate(seg.exits):
            c = 2 + k
            mask[idx[exit_id], c] = True
            # GP links from the one leaving the gate up to x_k
            cur = x1
            while True:
                mask[idx[cur], c] = True
                if cur == x_k:
                    break
                end = net.links[cur].end_node
                nxt = [j for j in net.nodes[end].outputs if net.links[j].group is LaneGroup.GP]
                cur = nxt[0]
    return mask


def compile_network(net: Network, dt: float, check_gp_only_on_ml: bool | None = None) -> CompiledNetwork:
    """Flatten ``net`` for a time step of ``dt`` hours."""
    link_ids = sorted(net.links)
    node_ids = sorted(net.nodes)
    li = {l: k for k, l in enumerate(link_ids)}
    ni = {n: k for k, n in enumerate(node_ids)}
    NL, NN, C = len(link_ids), len(node_ids), net.n_classes
    f64 = lambda: np.zeros(NL)
    L, lanes, vf, vdt, wdt, nJ, nlo = f64(), f64(), f64(), f64(), f64(), f64(), f64()
    Fon, Foff, hon, hoff, sig = f64(), f64(), f64(), f64(), f64()
    gp_of = np.full(NL, -1, dtype=np.int64)
    is_ml = np.zeros(NL, dtype=np.bool_)
    is_or = np.zeros(NL, dtype=np.bool_)
    is_de = np.zeros(NL, dtype=np.bool_)
    for k, lid in enumerate(link_ids):
        l = net.links[lid]
        on, off = l.diagram(True), l.diagram(False)
        L[k], lanes[k], vf[k] = l.length, l.lanes, on.free_flow_speed
        vdt[k], wdt[k], nJ[k] = on.free_flow_speed * dt, on.congestion_wave_speed * dt, on.jam_density
        nlo[k] = on.low_critical_density
        Fon[k], Foff[k] = on.capacity * dt, off.capacity * dt
        hon[k], hoff[k] = on.high_critical_density, off.high_critical_density
        sig[k] = l.sigma
        is_ml[k] = l.group is LaneGroup.ML
        is_or[k] = l.is_origin
        is_de[k] = l.is_destination
        if is_ml[k] and l.sigma > 0:
            g = net.parallel_gp(lid)
            if g is not None:
                gp_of[k] = li[g]
    if net.access is Access.GATED:
        Foff[:], hoff[:] = Fon, hon
    MAXM = max((len(n.inputs) for n in net.nodes.values()), default=1)
    MAXN = max((len(n.outputs) for n in net.nodes.values()), default=1)
    n_in = np.zeros(NN, dtype=np.int64)
    n_out = np.zeros(NN, dtype=np.int64)
    in_idx = np.full((NN, MAXM), -1, dtype=np.int64)
    out_idx = np.full((NN, MAXN), -1, dtype=np.int64)
    p = np.zeros((NN, MAXM))
    p_reg = np.zeros((NN, MAXM))
    eta = np.zeros((NN, MAXM, MAXN, MAXN))
    same = np.full((NN, MAXM), -1, dtype=np.int64)
    lam = np.full(NN, -1.0)
    off_col = np.full(NN, -1, dtype=np.int64)
    coef = np.zeros((NN, MAXM))
    beta_on = np.zeros((NN, MAXM, MAXN, C))
    beta_off = np.zeros((NN, MAXM, MAXN, C))
    offramp_nodes, offramp_of = [], {}
    for k, nid in enumerate(node_ids):
        node = net.nodes[nid]
        M, N = len(node.inputs), len(node.outputs)
        n_in[k], n_out[k] = M, N
        in_idx[k, :M] = [li[i] for i in node.inputs]
        out_idx[k, :N] = [li[j] for j in node.outputs]
        p[k, :M] = node.priorities
        p_reg[k, :M] = regularize(np.asarray(node.priorities, dtype=float))
        for a, i in enumerate(node.inputs):
            for b1, jr in enumerate(node.outputs):
                for b2, j in enumerate(node.outputs):
                    iv = node.restriction(i, jr, j)
                    eta[k, a, b1, b2] = 0.0 if iv is None else iv[1] - iv[0]
        for i, j in node.same_lane_pairs:
            if i in node.inputs and j in node.outputs:
                same[k, node.inputs.index(i)] = node.outputs.index(j)
        if node.inertia is not None:
            lam[k] = node.inertia
        for b, j in enumerate(node.outputs):
            if net.links[j].group is LaneGroup.OFFRAMP:
                off_col[k] = b
                offramp_nodes.append(nid)
                offramp_of[nid] = j
        if off_col[k] >= 0:
            co = exit_coefficients(net, node)
            coef[k, :M] = [co[i] for i in node.inputs]
        for tab, pol in ((beta_on, True), (beta_off, False)):
            t = _tables(net, node, pol)
            for a, i in enumerate(node.inputs):
                for b, j in enumerate(node.outputs):
                    for c in range(C):
                        tab[k, a, b, c] = _encode(t.get((i, j, c), Split.UNDEFINED))
    G = len(net.gate_segments)
    K = max(0, C - 2)
    gate_ml = np.array([li[s.ml_link] for s in net.gate_segments], dtype=np.int64)
    gate_exit_node = np.full((G, max(K, 1)), -1, dtype=np.int64)
    for g, s in enumerate(net.gate_segments):
        for k, (exit_id, _) in enumerate(s.exits):
            gate_exit_node[g, k] = ni[net.links[exit_id].begin_node]
    confine = confinement_mask(net)
    if check_gp_only_on_ml is False:
        confine[:, 0] = True
    arrays = Arrays(
        L, lanes, vf, vdt, wdt, nJ, nlo, Fon, Foff, hon, hoff, sig, gp_of, is_ml, is_or, is_de, confine,
        n_in, n_out, in_idx, out_idx, p, p_reg, eta, same, lam, off_col, coef, gate_ml, gate_exit_node,
    )
    return CompiledNetwork(net, dt, arrays, link_ids, node_ids, li, ni, beta_on, beta_off, offramp_nodes, offramp_of)


# ---------------------------------------------------------------------------
# kernel
# ---------------------------------------------------------------------------

State = namedtuple("State", ["n", "theta", "speed", "status"])
Accum = namedtuple(
    "Accum",
    ["n_sum", "fout_sum", "fin_sum", "vmt", "vht", "delay", "audit", "split_num", "split_den", "beta_sum", "beta_cnt",
     "beta_wsum", "beta_w", "delivered", "bis_status", "avail", "forecast"],
)


@numba.njit(cache=True)
def _advance(A, st, acc, n_steps, t0, dt, policy, beta_tab, demand, gate_beta, calib_mode, target, delta,
             int_end, gated, bis_tol, bis_max_iter, delay_speed):
    NL, C = st.n.shape
    NN = A.n_in.shape[0]
    S = np.zeros((NL, C))
    R = np.zeros(NL)
    fin = np.zeros((NL, C))
    fout = np.zeros((NL, C))
    vstep = np.zeros(NL)
    Fstep = np.zeros(NL)
    vmph = np.zeros(NL)
    from_gp = np.zeros(gate_beta.shape)
    n = st.n
    for step in range(n_steps):
        t = t0 + step
        fin[:, :] = 0.0
        fout[:, :] = 0.0
        # metastate and effective diagram
        for l in range(NL):
            tot = 0.0
            for c in range(C):
                tot += n[l, c]
            nhi = A.nhi_on[l] if policy else A.nhi_off[l]
            st.theta[l] = metastate(tot, st.theta[l], A.n_low[l], nhi)
            vstep[l] = A.vdt[l]
            Fstep[l] = A.Fdt_on[l] if policy else A.Fdt_off[l]
            vmph[l] = A.vf[l]
        # friction on managed lanes next to a congested GP link
        for l in range(NL):
            g = A.gp_of[l]
            if g < 0:
                continue
            tot = 0.0
            for c in range(C):
                tot += n[l, c]
            nhi = A.nhi_on[l] if policy else A.nhi_off[l]
            active, v_hat, F_hat, _ = friction_kernel(
                A.sigma[l], A.vf[l], nhi, tot, st.speed[g], A.vf[g], st.speed[l]
            )
            if active:
                vmph[l] = v_hat
                vstep[l] = v_hat * dt
                Fstep[l] = F_hat * dt
        # demand and supply
        for l in range(NL):
            sending(n[l], vstep[l], Fstep[l], S[l])
            tot = 0.0
            for c in range(C):
                tot += n[l, c]
            R[l] = receiving(tot, st.theta[l], Fstep[l], A.wdt[l], A.nJ[l])
        # destination-class switching of the traffic leaving through each gate;
        # the share of each destination class drawn from GP-only traffic is kept
        # so that its outflow can be charged back to the classes it came from
        for gi in range(A.gate_ml.shape[0]):
            l = A.gate_ml[gi]
            s0 = S[l, 0]
            s1 = S[l, 1]
            switch_classes(S[l], 1.0, gate_beta[gi], gate_beta[gi])
            for q in range(gate_beta.shape[1]):
                m0 = gate_beta[gi, q] * s0
                m1 = gate_beta[gi, q] * s1
                s0 -= m0
                s1 -= m1
                from_gp[gi, q] = m0 / (m0 + m1) if m0 + m1 > 0.0 else 0.0
        # nodes
        for k in range(NN):
            M = A.n_in[k]
            N = A.n_out[k]
            Sx = np.empty((M, C))
            for a in range(M):
                for c in range(C):
                    Sx[a, c] = S[A.in_idx[k, a], c]
            Rx = np.empty(N)
            for b in range(N):
                Rx[b] = R[A.out_idx[k, b]]
            bt = np.ascontiguousarray(beta_tab[k, :M, :N, :])
            beta, _, _ = complete_splits(Sx, Rx, bt, A.p_reg[k, :M].copy(), A.same_lane[k, :M].copy(),
                                         A.lam[k], MAX_ITER)
            for a in range(M):
                for c in range(C):
                    if Sx[a, c] > 1e-12:
                        rs = 0.0
                        for b in range(N):
                            rs += beta[a, b, c]
                        if rs < 1.0 - ROW_TOL:
                            st.status[0] = 1
                            st.status[1] = t
                            st.status[2] = A.in_idx[k, a]
                            st.status[3] = c
                            return
            pk = A.p[k, :M].copy()
            ek = np.ascontiguousarray(A.eta[k, :M, :N, :N])
            off = A.off_col[k]
            if calib_mode == 2 and off >= 0 and target[k] >= 0.0:
                dk = np.ascontiguousarray(delta[k, :M, :N, :])
                ck = A.coef[k, :M].copy()
                avail = 0.0
                for a in range(M):
                    for c in range(min(C, N_REGULAR)):
                        avail += ck[a] * Sx[a, c]
                # what is left of the interval's target volume, spread over the
                # remaining steps in proportion to forecast availability
                left = target[k] - acc.delivered[k]
                if left < 0.0:
                    left = 0.0
                horizon = avail + acc.forecast[t, k]
                if horizon > FLOW_FLOOR:  # false for NaN: no forecast
                    want = left * avail / horizon
                else:
                    want = left / (int_end - t)
                b_, psi, _, status = bisect_split(Sx, Rx, beta, dk, ck, off, pk, ek, want, gated,
                                                  bis_tol, bis_max_iter)
                q, f = offramp_inflow(Sx, Rx, beta, dk, ck, off, b_, pk, ek)
                acc.delivered[k] += q
                acc.beta_sum[k] += b_
                acc.beta_cnt[k] += 1
                # ratio estimate: interval volume over volume per unit split
                if b_ > 0.0:
                    acc.beta_wsum[k] += q
                    acc.beta_w[k] += q / b_
                acc.bis_status[k, status] += 1
            else:
                f = node_flows(Sx, Rx, beta, pk, ek)
            if calib_mode == 1 and off >= 0:
                for a in range(M):
                    for c in range(min(C, N_REGULAR)):
                        acc.avail[t, k] += A.coef[k, a] * Sx[a, c]
                for a in range(M):
                    for c in range(min(C, N_REGULAR)):
                        for b in range(N):
                            acc.split_num[k, a, b, c] += beta[a, b, c] * Sx[a, c]
                        acc.split_den[k, a, c] += Sx[a, c]
            for a in range(M):
                i = A.in_idx[k, a]
                for b in range(N):
                    j = A.out_idx[k, b]
                    for c in range(C):
                        fout[i, c] += f[a, b, c]
                        fin[j, c] += f[a, b, c]
        for gi in range(A.gate_ml.shape[0]):
            l = A.gate_ml[gi]
            for q in range(gate_beta.shape[1]):
                x = fout[l, FIRST_DESTINATION + q]
                fout[l, 0] += x * from_gp[gi, q]
                fout[l, 1] += x * (1.0 - from_gp[gi, q])
                fout[l, FIRST_DESTINATION + q] = 0.0
        # boundaries
        for l in range(NL):
            if A.is_origin[l]:
                for c in range(C):
                    fin[l, c] += demand[l, c]
                    acc.audit[0] += demand[l, c]
            if A.is_dest[l]:
                for c in range(C):
                    fout[l, c] += S[l, c]
                    acc.audit[1] += S[l, c]
        # speeds, metrics, density update
        for l in range(NL):
            tot = 0.0
            out = 0.0
            for c in range(C):
                tot += n[l, c]
                out += fout[l, c]
            if tot > 0.0:
                st.speed[l] = out / tot / dt
            else:
                st.speed[l] = vmph[l]
            acc.n_sum[l] += tot
            acc.fout_sum[l] += out
            inn = 0.0
            for c in range(C):
                inn += fin[l, c]
            acc.fin_sum[l] += inn
            vmt = out * A.L[l]
            vht = tot * A.L[l] * dt
            acc.vmt[l] += vmt
            acc.vht[l] += vht
            if st.speed[l] < delay_speed:
                d = vht - vmt / delay_speed
                if d > 0.0:
                    acc.delay[l] += d
            for c in range(C):
                x = n[l, c] + (fin[l, c] - fout[l, c]) / A.L[l]
                if x < 0.0:
                    if x < -NEG_TOL * (1.0 + A.nJ[l]):
                        st.status[0] = 3
                        st.status[1] = t
                        st.status[2] = l
                        st.status[3] = c
                        return
                    acc.audit[2] += -x * A.L[l]
                    acc.audit[3] += 1.0
                    x = 0.0
                n[l, c] = x
                if x > CONFINE_TOL and not A.confine[l, c]:
                    st.status[0] = 2
                    st.status[1] = t
                    st.status[2] = l
                    st.status[3] = c
                    return
        st.status[4] = t + 1


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


@dataclass
class Controls:
    """Time-varying inputs, piecewise constant on ``interval_s`` blocks.

    demand          link id -> (intervals, classes) array in veh/h, origins only
    offramp_splits  node id -> per-interval offramp split
    ml_schedule     list of (start_s, end_s) windows with the managed-lane policy on;
                    ``None`` keeps the policy on for the whole run
    """

    demand: dict[int, np.ndarray] = field(default_factory=dict)
    offramp_splits: dict[int, np.ndarray] = field(default_factory=dict)
    ml_schedule: list[tuple[float, float]] | None = None
    interval_s: float = 300.0

    def policy_at(self, t_s: float) -> bool:
        if self.ml_schedule is None:
            return True
        return any(a <= t_s < b for a, b in self.ml_schedule)

    def interval(self, t_s: float) -> int:
        return int(t_s // self.interval_s)


def _held(arr: np.ndarray, k: int):
    return arr[min(k, len(arr) - 1)]


@dataclass
class MetricsReport:
    vmt: dict[str, float]
    vht: dict[str, float]
    delay: dict[str, float]

    def as_dict(self) -> dict:
        groups = list(self.vmt)
        return {g: {"vmt": self.vmt[g], "vht": self.vht[g], "delay": self.delay[g]} for g in groups}


@dataclass
class Audit:
    initial: float  # vehicles on the network at t = 0
    injected: float
    discharged: float
    final: float
    clamped_mass: float  # vehicles added back by clamping tiny negative densities
    clamp_events: int

    @property
    def imbalance(self) -> float:
        return self.initial + self.injected + self.clamped_mass - self.discharged - self.final

    @property
    def relative_imbalance(self) -> float:
        scale = max(self.initial + self.injected, self.discharged + self.final, 1e-300)
        return abs(self.imbalance) / scale


@dataclass
class SimOutput:
    link_ids: list[int]
    groups: list[str]
    lanes: np.ndarray
    interval_starts: np.ndarray  # seconds
    density: np.ndarray  # (intervals, links) veh/mi/lane
    flow: np.ndarray  # (intervals, links) veh/h/lane, outflow
    inflow: np.ndarray  # (intervals, links) veh/h, total entering
    speed: np.ndarray  # (intervals, links) mph
    metrics: MetricsReport
    audit: Audit
    steps: int
    splits: dict[int, np.ndarray] | None = None  # node id -> (intervals, M, N, C) remaining distribution
    calibrated_beta: dict[int, np.ndarray] | None = None  # node id -> per-interval mean beta
    bisection_status: dict[int, np.ndarray] | None = None
    availability: dict[int, np.ndarray] | None = None  # node id -> per-step exitable demand (veh/step)


def speed_field(out: SimOutput) -> list[tuple[float, int, str, float, float, float]]:
    """Contour rows ``(interval_start_s, link_id, lane_group, density, flow, speed)``."""
    rows = []
    for t, start in enumerate(out.interval_starts):
        for k, lid in enumerate(out.link_ids):
            rows.append((float(start), lid, out.groups[k], float(out.density[t, k]), float(out.flow[t, k]),
                         float(out.speed[t, k])))
    return rows


class Simulator:
    """Runs a network under controls with a fixed step of ``dt_s`` seconds."""

    def __init__(
        self,
        net: Network,
        dt_s: float,
        controls: Controls | None = None,
        *,
        cadence_s: float = 300.0,
        delay_speed: float = 45.0,
        metrics_include_ramps: bool = False,
        initial_density: dict[int, np.ndarray] | None = None,
        bisection_tol: float = 1e-3,
        bisection_max_iter: int = 60,
    ):
        if dt_s <= 0:
            raise ValueError("time step must be positive")
        self.net = net
        self.dt_s = float(dt_s)
        self.dt = dt_s / 3600.0
        self.controls = controls or Controls()
        self.cadence_s = float(cadence_s)
        self.delay_speed = float(delay_speed)
        self.include_ramps = metrics_include_ramps
        self.bisection_tol = bisection_tol
        self.bisection_max_iter = bisection_max_iter
        always_on = self.controls.ml_schedule is None or net.access is Access.GATED
        self.cn = compile_network(net, self.dt, check_gp_only_on_ml=True if always_on else False)
        NL, C = self.cn.n_links, self.cn.n_classes
        self.n0 = np.zeros((NL, C))
        for lid, v in (initial_density or {}).items():
            self.n0[self.cn.link_index[lid]] = v

    # -- per-block controls -------------------------------------------------
    def _demand(self, k: int) -> np.ndarray:
        cn = self.cn
        d = np.zeros((cn.n_links, cn.n_classes))
        for lid, arr in self.controls.demand.items():
            arr = np.atleast_2d(np.asarray(arr, dtype=float))
            row = _held(arr, k)
            d[cn.link_index[lid], : len(row)] = row * self.dt
        return d

    def _offramp_beta(self, k: int) -> dict[int, float]:
        out = {}
        for nid in self.cn.offramp_nodes:
            if nid in self.controls.offramp_splits:
                out[nid] = float(_held(np.asarray(self.controls.offramp_splits[nid], dtype=float), k))
            else:
                out[nid] = float(self.net.nodes[nid].offramp_split or 0.0)
        return out

    def _beta_table(self, policy: bool, betas: dict[int, float]) -> np.ndarray:
        cn = self.cn
        tab = (cn.beta_on if policy else cn.beta_off).copy()
        A = cn.arrays
        for nid, b in betas.items():
            k = cn.node_index[nid]
            off = A.off_col[k]
            for a in range(A.n_in[k]):
                tab[k, a, off, :N_REGULAR] = A.coef[k, a] * b
        return tab

    def _gate_beta(self, betas: dict[int, float]) -> np.ndarray:
        A = self.cn.arrays
        G = A.gate_ml.shape[0]
        K = max(0, self.cn.n_classes - 2)
        gb = np.zeros((G, K))
        for g in range(G):
            for k in range(K):
                nk = A.gate_exit_node[g, k]
                if nk >= 0:
                    gb[g, k] = betas[self.cn.node_ids[nk]]
        return gb

    # -- run ------------------------------------------------------------------
    def run(
        self,
        horizon_s: float,
        *,
        calib_mode: int = CALIB_OFF,
        targets: dict[int, np.ndarray] | None = None,
        remaining: dict[int, np.ndarray] | None = None,
        availability: dict[int, np.ndarray] | None = None,
    ) -> SimOutput:
        """Simulate ``horizon_s`` seconds.

        ``targets`` (node id -> per-interval offramp inflow in veh/h) and
        ``remaining`` (node id -> per-interval (M, N, C) distribution) are used
        with ``calib_mode=CALIB_BISECT``. ``availability`` (node id -> per-step
        exitable demand, as recorded by a ``CALIB_RECORD`` run) shapes each
        interval's target volume over its steps; without it the volume is
        spread evenly.
        """
        cn, A = self.cn, self.cn.arrays
        NL, NN, C = cn.n_links, len(cn.node_ids), cn.n_classes
        MAXM, MAXN = A.in_idx.shape[1], A.out_idx.shape[1]
        T = int(round(horizon_s / self.dt_s))
        step_cad = max(1, int(round(self.cadence_s / self.dt_s)))
        step_int = max(1, int(round(self.controls.interval_s / self.dt_s)))
        n_out = -(-T // step_cad)
        st = State(self.n0.copy(), np.zeros(NL, dtype=np.int64), A.vf.copy(), np.zeros(5, dtype=np.int64))
        initial = float((st.n.sum(axis=1) * A.L).sum())
        dens = np.zeros((n_out, NL))
        flow = np.zeros((n_out, NL))
        inflow = np.zeros((n_out, NL))
        speed = np.zeros((n_out, NL))
        n_int = -(-T // step_int)
        rec_splits = {nid: np.zeros((n_int, MAXM, MAXN, C)) for nid in cn.offramp_nodes} if calib_mode == CALIB_RECORD else None
        rec_beta = {nid: np.full(n_int, np.nan) for nid in cn.offramp_nodes} if calib_mode == CALIB_BISECT else None
        rec_status = {nid: np.zeros(8, dtype=np.int64) for nid in cn.offramp_nodes} if calib_mode == CALIB_BISECT else None
        acc = Accum(np.zeros(NL), np.zeros(NL), np.zeros(NL), np.zeros(NL), np.zeros(NL), np.zeros(NL), np.zeros(4),
                    np.zeros((NN, MAXM, MAXN, C)), np.zeros((NN, MAXM, C)), np.zeros(NN), np.zeros(NN),
                    np.zeros(NN), np.zeros(NN), np.zeros(NN), np.zeros((NN, 8), dtype=np.int64),
                    np.zeros((T if calib_mode == CALIB_RECORD else 0, NN)),
                    _forecast(cn, availability, T, step_int) if calib_mode == CALIB_BISECT else np.zeros((0, NN)))
        gated = cn.net.access is Access.GATED
        tgt = np.full(NN, -1.0)
        dlt = np.zeros((NN, MAXM, MAXN, C))
        # event boundaries: cadence, demand intervals, policy switches
        bounds = set(range(0, T, step_cad)) | set(range(0, T, step_int)) | {T}
        if self.controls.ml_schedule is not None:
            for a, b in self.controls.ml_schedule:
                for x in (a, b):
                    s = int(np.ceil(x / self.dt_s - 1e-9))
                    if 0 < s < T:
                        bounds.add(s)
        bounds = sorted(bounds)
        for t0, t1 in zip(bounds[:-1], bounds[1:]):
            k = t0 // step_int
            ts = t0 * self.dt_s
            policy = self.controls.policy_at(ts) if cn.net.access is Access.FULL else True
            betas = self._offramp_beta(k)
            tab = self._beta_table(policy, betas)
            int_end = min((k + 1) * step_int, T)
            if calib_mode == CALIB_BISECT:
                if t0 % step_int == 0:
                    acc.delivered[:] = 0.0
                tgt[:] = -1.0
                for nid, arr in (targets or {}).items():
                    kk = cn.node_index[nid]
                    # target volume (veh) over the interval
                    tgt[kk] = float(_held(np.asarray(arr, dtype=float), k)) * self.dt * (int_end - k * step_int)
                    dlt[kk] = _held(remaining[nid], k) if remaining and nid in remaining else default_remaining(cn, nid)
            _advance(A, st, acc, t1 - t0, t0, self.dt, policy, tab, self._demand(k), self._gate_beta(betas),
                     calib_mode, tgt, dlt, int_end, gated, self.bisection_tol, self.bisection_max_iter,
                     self.delay_speed)
            if st.status[0] != OK:
                code, t, idx, c = (int(x) for x in st.status[:4])
                where = f"link {cn.link_ids[idx]}" if code != ERR_NO_ROUTE else f"link {cn.link_ids[idx]} (node input)"
                raise SimulationError(f"step {t}: {ERROR_TEXT[code]} ({where}, class {c})")
            if (t1 % step_int == 0 or t1 == T) and calib_mode != CALIB_OFF:
                kk_int = (t1 - 1) // step_int
                for nid in cn.offramp_nodes:
                    kk = cn.node_index[nid]
                    if calib_mode == CALIB_RECORD:
                        rec_splits[nid][kk_int] = _normalized_remaining(cn, kk, acc.split_num[kk], acc.split_den[kk])
                    elif acc.beta_w[kk] > 0:
                        # demand-weighted, so that the interval's split reproduces its volume
                        rec_beta[nid][kk_int] = acc.beta_wsum[kk] / acc.beta_w[kk]
                    elif acc.beta_cnt[kk] > 0:
                        rec_beta[nid][kk_int] = acc.beta_sum[kk] / acc.beta_cnt[kk]
                for a in (acc.split_num, acc.split_den, acc.beta_sum, acc.beta_cnt, acc.beta_wsum, acc.beta_w):
                    a[:] = 0.0
            if t1 % step_cad == 0 or t1 == T:
                o = (t1 - 1) // step_cad
                m = t1 - o * step_cad
                nsum, fsum = acc.n_sum, acc.fout_sum
                dens[o] = nsum / m / A.lanes
                flow[o] = fsum / m / self.dt / A.lanes
                inflow[o] = acc.fin_sum / m / self.dt
                with np.errstate(divide="ignore", invalid="ignore"):
                    speed[o] = np.where(nsum > 0, fsum / np.where(nsum > 0, nsum, 1.0) / self.dt, A.vf)
                acc.n_sum[:] = 0.0
                acc.fout_sum[:] = 0.0
                acc.fin_sum[:] = 0.0
        if rec_status is not None:
            for nid in cn.offramp_nodes:
                rec_status[nid] = acc.bis_status[cn.node_index[nid]].copy()
        final = float((st.n.sum(axis=1) * A.L).sum())
        aud = Audit(initial, float(acc.audit[0]), float(acc.audit[1]), final, float(acc.audit[2]), int(acc.audit[3]))
        self.final_state = st
        groups = [cn.net.links[l].group.value for l in cn.link_ids]
        return SimOutput(
            link_ids=list(cn.link_ids),
            groups=groups,
            lanes=A.lanes.copy(),
            interval_starts=np.arange(n_out) * step_cad * self.dt_s,
            density=dens,
            flow=flow,
            inflow=inflow,
            speed=speed,
            metrics=self._metrics(acc.vmt, acc.vht, acc.delay, groups),
            audit=aud,
            steps=T,
            splits=rec_splits,
            calibrated_beta=rec_beta,
            bisection_status=rec_status,
            availability={nid: acc.avail[:, cn.node_index[nid]].copy() for nid in cn.offramp_nodes}
            if calib_mode == CALIB_RECORD else None,
        )

    def _metrics(self, vmt, vht, delay, groups) -> MetricsReport:
        g = np.array(groups)
        out = {"vmt": {}, "vht": {}, "delay": {}}
        sel = {"gp": g == "gp", "ml": g == "ml"}
        if self.include_ramps:
            sel["ramps"] = (g == "onramp") | (g == "offramp")
        for name, arr in (("vmt", vmt), ("vht", vht), ("delay", delay)):
            for key, m in sel.items():
                out[name][key] = float(arr[m].sum())
            out[name]["total"] = float(sum(out[name][key] for key in sel))
        return MetricsReport(out["vmt"], out["vht"], out["delay"])


def _forecast(cn: CompiledNetwork, availability: dict[int, np.ndarray] | None, T: int, step_int: int) -> np.ndarray:
    """Per step, the recorded availability still to come in the same interval (step excluded).

    NaN where nothing was recorded.
    """
    out = np.full((T, len(cn.node_ids)), np.nan)
    for nid, arr in (availability or {}).items():
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (T,):
            raise ValueError(f"node {nid}: availability has {arr.shape[0]} steps, run has {T}")
        k = cn.node_index[nid]
        for a in range(0, T, step_int):
            seg = arr[a: a + step_int]
            out[a: a + len(seg), k] = np.cumsum(seg[::-1])[::-1] - seg
    return out


def default_remaining(cn: CompiledNetwork, nid: int) -> np.ndarray:
    """Stay-in-lane distribution of non-exiting traffic at node ``nid``."""
    A = cn.arrays
    k = cn.node_index[nid]
    MAXM, MAXN = A.in_idx.shape[1], A.out_idx.shape[1]
    out = np.zeros((MAXM, MAXN, cn.n_classes))
    net = cn.net
    node = net.nodes[nid]
    gp_out = next(b for b, j in enumerate(node.outputs) if net.links[j].group is LaneGroup.GP)
    for a, i in enumerate(node.inputs):
        b = A.same_lane[k, a]
        if b < 0 or net.links[i].group is LaneGroup.ONRAMP:
            b = gp_out
        out[a, b, :] = 1.0
        if net.links[node.outputs[b]].group is LaneGroup.ML:
            out[a, b, 0] = 0.0
            out[a, gp_out, 0] = 1.0
    return out


def _normalized_remaining(cn: CompiledNetwork, k: int, num: np.ndarray, den: np.ndarray) -> np.ndarray:
    """Demand-weighted completed splits with the offramp column removed and rows renormalized."""
    A = cn.arrays
    off = A.off_col[k]
    fallback = default_remaining(cn, cn.node_ids[k])
    out = fallback.copy()
    M, N = A.n_in[k], A.n_out[k]
    for a in range(M):
        for c in range(min(cn.n_classes, N_REGULAR)):
            if den[a, c] <= 0:
                continue
            row = num[a, :N, c] / den[a, c]
            row = row.copy()
            row[off] = 0.0
            s = row.sum()
            if s > 1e-12:
                out[a, :N, c] = row / s
    return out
