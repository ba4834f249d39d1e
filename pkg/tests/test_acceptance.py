"""Acceptance criteria, one or more tests each.

A summary line ``ACn PASS|FAIL`` per criterion is written to the terminal
when the module finishes.
"""
import functools
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import DT_S, full_access, gated, mainline_demand, ramp_demand
from mlsim.bisection import SHORT_OF_DEMAND, OfframpProblem, psi_full_access, solve_beta_full_access
from mlsim.calibration import calibrate, read_targets, relative_residuals
from mlsim.engine import Controls, SimulationError, Simulator, confinement_mask
from mlsim.gates import GateContext, assign_destinations, switch_classes
from mlsim.link import (
    DENSITY_RTOL,
    FundamentalDiagram,
    LinkState,
    friction_adjust,
    friction_kernel,
    supply,
    update_metastate,
)
from mlsim.network import Access, ClassKind, LaneGroup, Link, Network, Node, Split, VehicleClass, validate
from mlsim.node import node_flows
from mlsim.scenario import parse_scenario
from mlsim.splits import SolverInput, solve_splits, solve_splits_with_inertia

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"

TITLES = {
    1: "conservation on 50 random networks, 1000 steps, 1e-9 relative, < 30 s",
    2: "metastate hysteresis and supply gap between sweep directions",
    3: "friction: 54 mph example, speed guard, zero friction is a no-op",
    4: "node model FIFO limits",
    5: "split solver balance, closure, even-weight inertia",
    6: "gate switching recursion and conservation",
    7: "offramp split bisection",
    8: "calibration round trip within 2% in <= 2 outer iterations, < 60 s",
    9: "24 h demo corridor: < 10 s, uncongested managed lane, friction dips",
    10: "destination classes stay confined in gated runs",
}
RESULTS: dict[int, str] = {}


@pytest.fixture(scope="module", autouse=True)
def _summary(request):
    yield
    tr = request.config.pluginmanager.get_plugin("terminalreporter")
    lines = [f"AC{n:<2} {RESULTS.get(n, 'NOT RUN'):<4}  {TITLES[n]}" for n in sorted(TITLES)]
    for line in ["", "acceptance criteria:"] + lines:
        tr.write_line(line) if tr is not None else print(line)


def criterion(n):
    """Record the outcome of a test under criterion ``n``; any failing test fails it."""

    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                RESULTS[n] = "FAIL"
                raise
            RESULTS.setdefault(n, "PASS")

        return wrapper

    return deco


# ---------------------------------------------------------------------------
# 1. conservation
# ---------------------------------------------------------------------------


def _random_network(rng):
    """Random acyclic network of generic links with hand-written split tables."""
    K = int(rng.integers(2, 11))  # nodes
    C = int(rng.integers(1, 5))
    classes = tuple(VehicleClass(c, ClassKind.GP_ONLY if c == 0 else ClassKind.SPECIAL) for c in range(C))
    links, ends = {}, []
    ends.append((None, 1))
    for _ in range(int(rng.integers(0, 3))):
        ends.append((None, int(rng.integers(1, K + 1))))
    for k in range(1, K):
        ends.append((k, k + 1))
    for _ in range(int(rng.integers(0, K))):
        a = int(rng.integers(1, K))
        ends.append((a, int(rng.integers(a + 1, K + 1))))
    ends.append((K, None))
    for _ in range(int(rng.integers(0, 3))):
        ends.append((int(rng.integers(1, K + 1)), None))
    for lid, (b, e) in enumerate(ends, start=1):
        lanes = int(rng.integers(1, 5))
        # capacity over free-flow speed stays above the low critical density (25 vpmpl)
        fd = FundamentalDiagram.from_lane_values(lanes, rng.uniform(1900, 2200), rng.uniform(50, 72), 150)
        links[lid] = Link(lid, LaneGroup.GP, rng.uniform(0.15, 1.0), lanes, fd, 0.0, b, e)
    nodes = {}
    for k in range(1, K + 1):
        ins = tuple(l for l, (b, e) in zip(links, ends) if e == k)
        outs = tuple(l for l, (b, e) in zip(links, ends) if b == k)
        p = rng.uniform(0.05, 1.0, len(ins))
        table, restr = {}, {}
        for i in ins:
            for c in range(C):
                kinds = rng.integers(0, 3, len(outs))  # 0 undefined, 1 defined, 2 not applicable
                if not (kinds < 2).any():
                    kinds[0] = 1  # a row without undefined entries needs a defined one
                w = rng.uniform(0, 1, len(outs))
                budget = 1.0 if not (kinds == 0).any() else rng.uniform(0, 1)
                dsel = kinds == 1
                vals = np.zeros(len(outs))
                if dsel.any():
                    vals[dsel] = w[dsel] / w[dsel].sum() * budget
                for b, j in enumerate(outs):
                    table[(i, j, c)] = (Split.UNDEFINED, float(vals[b]), Split.NOT_APPLICABLE)[kinds[b]]
            for jr in outs:
                for j in outs:
                    if jr != j:
                        r = rng.integers(0, 3)
                        restr[(i, jr, j)] = ((0.0, 1.0), (0.0, 0.5), None)[r]
        nodes[k] = Node(k, ins, outs, tuple(p / p.sum()), restr, table)
    return Network(links, nodes, classes, Access.FULL, True, ())


@criterion(1)
def test_ac1_conservation_on_random_networks():
    rng = np.random.default_rng(1)
    T = 1000
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        net = _random_network(rng)
        assert [d for d in validate(net, DT_S / 3600) if d.level == "error"] == []
        C = net.n_classes
        demand = {l.id: rng.uniform(0, 3000, (1, C)) for l in net.origins()}
        n0 = {l.id: rng.uniform(0, 40, C) for l in net.links.values()}
        sim = Simulator(net, DT_S, Controls(demand=demand), cadence_s=DT_S, initial_density=n0)
        out = sim.run(T * DT_S)
        A = sim.cn.arrays
        stored0 = float((sim.n0.sum(axis=1) * A.L).sum())
        stored1 = float((sim.final_state.n.sum(axis=1) * A.L).sum())
        injected = sum(float(d.sum()) for d in demand.values()) * sim.dt * T
        dest = [k for k, lid in enumerate(out.link_ids) if net.links[lid].is_destination]
        discharged = float((out.flow[:, dest] * out.lanes[dest]).sum() * sim.dt)
        bal = abs(injected - discharged - (stored1 - stored0)) / (stored0 + injected)
        assert out.audit.relative_imbalance <= 1e-9
        worst = max(worst, bal)
    elapsed = time.perf_counter() - t0
    assert worst <= 1e-9, f"worst relative imbalance {worst:.3g}"
    assert elapsed < 30.0, f"{elapsed:.1f} s"


# ---------------------------------------------------------------------------
# 2. hysteresis
# ---------------------------------------------------------------------------


@criterion(2)
def test_ac2_backwards_lambda_hysteresis():
    fd = FundamentalDiagram.from_lane_values(3, 1900, 65, 150)
    dt = DT_S / 3600
    lo, hi, nJ = fd.low_critical_density, fd.high_critical_density, fd.jam_density
    grid = np.unique(np.concatenate([
        np.linspace(0, nJ, 4001), [lo, hi, np.nextafter(lo, 0), np.nextafter(hi, np.inf), hi * (1 + 2 * DENSITY_RTOL)],
    ]))
    theta, up = 0, {}
    for n in grid:
        theta = update_metastate(fd, LinkState(np.array([n]), theta))
        up[n] = (theta, supply(fd, LinkState(np.array([n]), theta), dt))
    down = {}
    for n in grid[::-1]:
        theta = update_metastate(fd, LinkState(np.array([n]), theta))
        down[n] = (theta, supply(fd, LinkState(np.array([n]), theta), dt))
    first_up = min(n for n in grid if up[n][0] == 1)
    last_down = min(n for n in grid if down[n][0] == 1)
    assert up[hi][0] == 0 and first_up > hi
    assert first_up == min(n for n in grid if n > hi * (1 + DENSITY_RTOL))
    assert down[lo][0] == 0 and last_down == min(n for n in grid if n > lo)
    band = [n for n in grid if lo < n <= hi]
    assert len(band) > 100
    for n in band:
        assert up[n][0] == 0 and down[n][0] == 1
        gap = down[n][1] - up[n][1]
        assert gap == fd.congestion_wave_speed * dt * (nJ - n) - fd.capacity * dt
        assert gap < 0  # the congested branch lies below capacity: the backwards lambda
    for n in grid:
        if n <= lo or n > hi * (1 + DENSITY_RTOL):
            assert up[n] == down[n]


# ---------------------------------------------------------------------------
# 3. friction
# ---------------------------------------------------------------------------


@criterion(3)
def test_ac3_friction_example():
    ml = FundamentalDiagram.from_lane_values(1, 1800, 70, 150)
    adj = friction_adjust(ml, 0.4, 30.0, 70.0, LinkState(np.array([5.0])), 65.0)
    assert adj.active and adj.free_flow_speed == 54.0


@criterion(3)
def test_ac3_guard_keeps_managed_lane_at_least_as_fast():
    n_hi = 1800 / 70
    for sigma in np.linspace(0.01, 1.0, 25):
        for v_gp in np.linspace(0.0, 64.0, 33):
            for v_prev in np.linspace(0.0, 70.0, 15):
                for total in np.linspace(0.0, 150.0, 61):
                    active, v_hat, F_hat, _ = friction_kernel(sigma, 70.0, n_hi, total, v_gp, 65.0, v_prev)
                    if active:
                        implied = v_hat if total <= 0 else min(v_hat, F_hat / total)
                        assert implied >= v_gp * (1 - 1e-12)


@criterion(3)
def test_ac3_zero_friction_run_is_bit_identical():
    def run(sigma, zero_out=False):
        net = full_access(n_seg=6, onramps=(2, 4), offramps=(3,), sigma=sigma)
        d = mainline_demand(net, 6400.0, share=0.2)
        d.update(ramp_demand(net, 2, 1200.0))
        d.update(ramp_demand(net, 4, 900.0))
        sim = Simulator(net, DT_S, Controls(demand=d))
        if zero_out:
            # the friction path stays wired to the GP links, with a zero coefficient
            A = sim.cn.arrays
            assert (A.gp_of[A.is_ml] >= 0).all() and A.is_ml.any()
            sim.cn.arrays = A._replace(sigma=np.zeros_like(A.sigma))
        return sim.run(3600.0)

    plain, zeroed, rubbing = run(0.0), run(0.3, zero_out=True), run(0.3)
    for name in ("density", "flow", "inflow", "speed"):
        assert np.array_equal(getattr(plain, name), getattr(zeroed, name))
    assert not np.array_equal(plain.speed, rubbing.speed)


# ---------------------------------------------------------------------------
# 4. FIFO limits
# ---------------------------------------------------------------------------


def _random_node(rng):
    M, N, C = int(rng.integers(1, 5)), int(rng.integers(2, 5)), int(rng.integers(1, 4))
    S = rng.uniform(0, 30, (M, C))
    raw = rng.uniform(0.01, 1, (M, N, C))
    beta = raw / raw.sum(axis=1, keepdims=True)
    p = rng.uniform(0.05, 1, M)
    return S, beta, p / p.sum(), M, N


@criterion(4)
def test_ac4_strict_fifo_blocks_demanding_inputs():
    rng = np.random.default_rng(4)
    for _ in range(500):
        S, beta, p, M, N = _random_node(rng)
        R = rng.uniform(0, 100, N)
        blocked = int(rng.integers(0, N))
        R[blocked] = 0.0
        beta[: M // 2, blocked, :] = 0.0
        beta /= beta.sum(axis=1, keepdims=True)
        f = node_flows(S, R, beta, p, np.ones((M, N, N)))
        demanding = (beta[:, blocked, :] * S).sum(axis=1) > 0
        assert (f[demanding] == 0.0).all()


@criterion(4)
def test_ac4_no_mutual_restriction_keeps_unblocked_flows():
    rng = np.random.default_rng(44)
    for _ in range(500):
        S, beta, p, M, N = _random_node(rng)
        R = np.full(N, 1e6)
        blocked = int(rng.integers(0, N))
        R[blocked] = 0.0
        eta = np.zeros((M, N, N))
        for j in range(N):
            eta[:, j, j] = 1.0
        f = node_flows(S, R, beta, p, eta)
        free = [j for j in range(N) if j != blocked]
        assert np.array_equal(f[:, free, :], (beta * S[:, None, :])[:, free, :])
        assert (f[:, blocked, :] == 0.0).all()


# ---------------------------------------------------------------------------
# 5. split solver
# ---------------------------------------------------------------------------


@criterion(5)
def test_ac5_single_input_ratios_are_balanced():
    rng = np.random.default_rng(5)
    for _ in range(500):
        N = int(rng.integers(2, 6))
        S = rng.uniform(0.1, 50)
        R = rng.uniform(0.5, 40, N)
        out = solve_splits(SolverInput([[S]], R, np.full((1, N, 1), np.nan), [1.0]))
        ratios = out.splits[0, :, 0] * S / R
        assert ratios.max() - ratios.min() <= 1e-6 * max(1.0, ratios.max())


@criterion(5)
def test_ac5_closure_is_supply_proportional():
    rng = np.random.default_rng(55)
    for _ in range(200):
        N = int(rng.integers(2, 6))
        R = rng.uniform(0.5, 40, N)
        S = rng.uniform(1.01, 5.0) * R.sum()  # every output oversubscribed
        out = solve_splits(SolverInput([[S]], R, np.full((1, N, 1), np.nan), [1.0]))
        assert np.array_equal(out.splits[0, :, 0], R / R.sum())


@criterion(5)
def test_ac5_even_inertia_matches_plain_solver():
    rng = np.random.default_rng(555)
    for _ in range(300):
        M, N, C = int(rng.integers(1, 4)), int(rng.integers(2, 5)), int(rng.integers(1, 3))
        S = rng.uniform(0, 30, (M, C))
        R = rng.uniform(0.5, 40, N)
        p = rng.uniform(0.05, 1, M)
        beta = np.full((M, N, C), np.nan)
        same = {i: int(rng.integers(0, N)) for i in range(M)}
        plain = solve_splits(SolverInput(S, R, beta, p / p.sum()))
        lam = solve_splits_with_inertia(SolverInput(S, R, beta, p / p.sum(), same_lane=same, inertia=1.0 / N))
        assert np.array_equal(plain.splits, lam.splits)


# ---------------------------------------------------------------------------
# 6. gate switching
# ---------------------------------------------------------------------------


@criterion(6)
def test_ac6_two_exit_recursion():
    out = assign_destinations(LinkState(np.array([0.0, 8.0, 0.0, 0.0])), GateContext(11, 1.0, (0.0, 0.0), (0.5, 0.5)))
    assert out.densities.tolist() == [0.0, 2.0, 4.0, 2.0]


@criterion(6)
def test_ac6_switching_conserves_mass():
    rng = np.random.default_rng(6)
    for _ in range(2000):
        K = int(rng.integers(1, 6))
        n = rng.uniform(0, 200, 2 + K)
        m = n.copy()
        switch_classes(m, rng.uniform(), rng.uniform(0, 1, K), rng.uniform(0, 1, K))
        assert abs(m.sum() - n.sum()) <= 1e-12 * n.sum()


# ---------------------------------------------------------------------------
# 7. bisection
# ---------------------------------------------------------------------------


def _offramp_node(gp_demand, ml_demand):
    S = np.array([[gp_demand, 0.0], [0.0, ml_demand], [0.0, 0.0]])
    rem = np.zeros((3, 3, 2))
    rem[0, 0], rem[1, 1], rem[2, 0] = 1.0, 1.0, 1.0
    return OfframpProblem(S, [1e6, 1e6, 1e6], 2, [1.0, 1.0, 0.0], remaining=rem, priorities=[0.6, 0.2, 0.2])


@criterion(7)
def test_ac7_uncongested_node_recovers_split():
    pr = _offramp_node(70.0, 30.0)
    r = solve_beta_full_access(pr, 20.0)
    assert abs(r.beta - 0.2) <= 1e-3
    assert abs(psi_full_access(r.beta, pr, 20.0)) <= 1e-3
    assert r.iterations <= 40


@criterion(7)
def test_ac7_infeasible_target_exits_everything():
    r = solve_beta_full_access(_offramp_node(7.0, 3.0), 15.0)
    assert r.beta == 1.0 and r.status == SHORT_OF_DEMAND


# ---------------------------------------------------------------------------
# 8. calibration
# ---------------------------------------------------------------------------


@criterion(8)
def test_ac8_calibration_round_trip():
    cfg = parse_scenario(SCENARIOS / "calibration_fixture.json")
    assert len([n for n in cfg.network.nodes]) == 5
    targets = read_targets(SCENARIOS / "calibration_targets.csv", cfg.network, cfg.scenario.interval_s)
    t0 = time.perf_counter()
    rep = calibrate(cfg.simulator(), cfg.horizon_s, targets, outer_tol=0.02, max_outer=2)
    elapsed = time.perf_counter() - t0
    assert rep.converged and rep.outer_iterations <= 2
    for t in targets:
        assert relative_residuals(rep.simulated[t.offramp_id], t.flow_vph).max() <= 0.02
    assert elapsed < 60.0


# ---------------------------------------------------------------------------
# 9. demo corridor
# ---------------------------------------------------------------------------


@criterion(9)
def test_ac9_demo_corridor():
    cfg = parse_scenario(SCENARIOS / "demo_full_access.json")
    net = cfg.network
    assert len(net.links) == 50
    assert sum(l.length for l in net.links.values() if l.group is LaneGroup.GP) == pytest.approx(25, abs=1)
    cfg.simulator().run(600.0)  # compile outside the timed run
    sim = cfg.simulator()
    t0 = time.perf_counter()
    out = sim.run(cfg.horizon_s)
    elapsed = time.perf_counter() - t0
    assert out.steps == 17280
    assert elapsed < 10.0, f"{elapsed:.2f} s"

    # per-step managed-lane densities, against the low critical density
    fine = cfg.simulator()
    fine.cadence_s = DT_S
    per_step = fine.run(cfg.horizon_s)
    ml = [k for k, g in enumerate(per_step.groups) if g == "ml"]
    n_low = np.array([net.links[per_step.link_ids[k]].fd.low_critical_density / net.links[per_step.link_ids[k]].lanes
                      for k in ml])
    assert (per_step.density[:, ml] < n_low).all()

    gp = [k for k, g in enumerate(out.groups) if g == "gp"]
    hours = out.interval_starts / 3600
    gp_slow = out.speed[:, gp].min(axis=1) < 45.0
    ml_min = out.speed[:, ml].min(axis=1)
    assert gp_slow.any()
    assert ((hours[gp_slow] >= 5) & (hours[gp_slow] < 19)).all()
    assert (ml_min[gp_slow] < 68.0).all()  # friction dips while the GP lanes are congested
    assert ml_min[~gp_slow].max() == pytest.approx(70.0)


# ---------------------------------------------------------------------------
# 10. confinement
# ---------------------------------------------------------------------------


def _check_final_state(sim):
    mask = confinement_mask(sim.net)
    n = sim.final_state.n
    assert (n[~mask] == 0.0).all()


@criterion(10)
@pytest.mark.parametrize("case", ["demo", "two_gates", "three_exits_congested"])
def test_ac10_gated_runs_stay_confined(case):
    if case == "demo":
        cfg = parse_scenario(SCENARIOS / "demo_gated.json")
        sim = cfg.simulator()
        out = sim.run(cfg.horizon_s)
    else:
        if case == "two_gates":
            net = gated(sigma=0.3)
            main, ramp = 5000.0, 600.0
        else:
            net = gated(n_seg=9, gates=(1, 5), onramps=(2, 6), offramps=((2, 0.1), (3, 0.1), (4, 0.2), (7, 0.1)),
                        sigma=0.4)
            main, ramp = 6200.0, 1400.0
        d = mainline_demand(net, main, share=0.3)
        d.update(ramp_demand(net, net.gate_segments[0].gate_node + 1 if case != "two_gates" else 1, ramp))
        sim = Simulator(net, DT_S, Controls(demand=d))
        out = sim.run(7200.0)
    # the engine checks the confinement mask every step and raises on a violation
    assert out.audit.relative_imbalance < 1e-12
    _check_final_state(sim)
    dest = np.asarray(sim.final_state.n)[:, 2:]
    assert dest.sum() > 0  # destination traffic did flow


@criterion(10)
def test_ac10_violation_is_detected():
    net = gated()
    bad = np.zeros(net.n_classes)
    bad[2] = 1.0
    with pytest.raises(SimulationError, match="confined"):
        Simulator(net, DT_S, Controls(), initial_density={3: bad}).run(60.0)
