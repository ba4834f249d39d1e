import numpy as np
import pytest

from conftest import DT_S, full_access, gated, mainline_demand, ramp_demand, ramp_fd, segments, simulate
from mlsim.engine import Controls, SimulationError, Simulator, confinement_mask, speed_field
from mlsim.network import RampSpec, build_gated_access, disable_gate


def _col(out, lid):
    return out.link_ids.index(lid)


def test_steady_free_flow_density_is_demand_over_speed():
    net = full_access(n_seg=4, onramps=(), offramps=())
    _, out = simulate(net, mainline_demand(net, 3000.0))
    # origin links carry their own demand with no crossflow upstream
    assert out.density[-1, _col(out, 1)] == pytest.approx((3000 * 0.85 + 3000 * 0.075) / 65 / 3, rel=1e-9)
    assert out.density[-1, _col(out, 11)] == pytest.approx(3000 * 0.075 / 70, rel=1e-9)
    for gp, ml in ((1, 11), (2, 22), (3, 33), (4, 44)):
        total = out.flow[-1, _col(out, gp)] * 3 + out.flow[-1, _col(out, ml)]
        assert total == pytest.approx(3000.0, rel=1e-9)


def test_zero_demand_keeps_network_empty():
    net = full_access()
    _, out = simulate(net, {})
    assert (out.density == 0).all() and (out.flow == 0).all()
    assert out.metrics.vmt["total"] == 0.0 and out.metrics.delay["total"] == 0.0
    np.testing.assert_array_equal(out.speed[0], [net.links[l].fd.free_flow_speed for l in out.link_ids])


def test_gp_only_traffic_stays_off_the_managed_lane():
    net = full_access(n_seg=4, onramps=(1,), offramps=(2,))
    d = mainline_demand(net, 4000.0, share=0.0)
    d.update(ramp_demand(net, 1, 600.0, share=0.0))
    sim, out = simulate(net, d)
    ml = [k for k, g in enumerate(out.groups) if g == "ml"]
    assert (out.density[:, ml] == 0).all()
    assert out.metrics.vmt["ml"] == 0.0


def test_disabled_crossflow_matches_gated_layout():
    segs = segments(5)
    full = full_access(n_seg=5, onramps=(2, 3), offramps=())
    for node in (2, 3, 4):
        full = disable_gate(full, node)
    gate = build_gated_access(segs, [1], [RampSpec(k, 1, ramp_fd()) for k in (2, 3)], [])
    demand = mainline_demand(full, 5600.0, share=0.3)
    demand.update(ramp_demand(full, 2, 900.0))
    demand.update(ramp_demand(full, 3, 900.0))
    _, a = simulate(full, demand, 1800.0)
    _, b = simulate(gate, demand, 1800.0)
    assert a.link_ids == b.link_ids
    # the corridor congests, so the comparison covers the supply-limited regime too
    assert a.speed.min() < 60.0
    np.testing.assert_allclose(a.flow, b.flow, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(a.density, b.density, rtol=1e-9, atol=1e-9)


def test_gated_run_keeps_classes_confined():
    net = gated(sigma=0.3)
    d = mainline_demand(net, 5000.0, share=0.3)
    d.update(ramp_demand(net, 1, 600.0))
    _, out = simulate(net, d, 3600.0)
    assert out.audit.relative_imbalance < 1e-12
    mask = confinement_mask(net)
    ml_rows = [k for k, l in enumerate(sorted(net.links)) if net.links[l].group.value == "ml"]
    assert not mask[ml_rows, 0].any() and not mask[ml_rows, 2:].any()


def test_misplaced_class_is_reported():
    net = gated()
    # exit-1 traffic on the GP link past exit 1 still has a route, but must not exist
    bad = np.zeros(net.n_classes)
    bad[2] = 5.0
    with pytest.raises(SimulationError, match="confined"):
        Simulator(net, DT_S, Controls(), initial_density={3: bad}).run(60.0)
    # on a managed lane the row has no admissible output at all
    with pytest.raises(SimulationError, match="no applicable output"):
        Simulator(net, DT_S, Controls(), initial_density={22: bad}).run(60.0)


def test_runs_are_deterministic():
    net = full_access(n_seg=5, onramps=(1, 3), offramps=(2, 4), sigma=0.3)
    d = mainline_demand(net, 6000.0, share=0.3)
    d.update(ramp_demand(net, 1, 800.0))
    _, a = simulate(net, d, 1800.0)
    _, b = simulate(net, d, 1800.0)
    for name in ("density", "flow", "inflow", "speed"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    assert a.metrics.as_dict() == b.metrics.as_dict()


def test_speed_field_rows():
    net = full_access(n_seg=3)
    _, out = simulate(net, mainline_demand(net, 2000.0), 900.0)
    rows = speed_field(out)
    assert len(rows) == 3 * len(out.link_ids)
    t, lid, group, n, f, v = rows[len(out.link_ids)]
    assert t == 300.0 and lid == out.link_ids[0] and group == "gp"
    assert (n, f, v) == (out.density[1, 0], out.flow[1, 0], out.speed[1, 0])


def test_full_day_step_count_and_conservation():
    net = full_access(n_seg=4, onramps=(1,), offramps=(2,))
    n_int = 288
    t = np.arange(n_int)
    profile = 2500 + 3500 * np.exp(-((t - 90) / 20.0) ** 2)
    d = mainline_demand(net, 1.0, share=0.2, n_int=n_int)
    for arr in d.values():
        arr *= profile[:, None]
    d.update(ramp_demand(net, 1, 500.0))
    _, out = simulate(net, d, 86400.0, ml_schedule=[(5 * 3600, 9 * 3600)])
    assert out.steps == 17280
    assert out.density.shape == (288, len(out.link_ids))
    assert out.audit.relative_imbalance < 1e-12


def test_standing_queue_reports_delay():
    net = full_access(n_seg=4, onramps=(2,), offramps=())
    d = mainline_demand(net, 6000.0, share=0.1)
    d.update(ramp_demand(net, 2, 1500.0))
    _, out = simulate(net, d, 3600.0)
    assert out.metrics.delay["gp"] > 0
    assert out.metrics.vht["total"] > out.metrics.vmt["total"] / 65


def test_friction_slows_managed_lane_next_to_congestion():
    d_args = dict(n_seg=4, onramps=(2,), offramps=())
    speeds = []
    for sigma in (0.0, 0.4):
        net = full_access(sigma=sigma, **d_args)
        d = mainline_demand(net, 6000.0, share=0.1)
        d.update(ramp_demand(net, 2, 1500.0))
        _, out = simulate(net, d, 3600.0)
        speeds.append(out.speed[-1, _col(out, 22)])
    assert speeds[0] == pytest.approx(70.0)
    assert speeds[1] < speeds[0]


def test_overlong_time_step_is_reported():
    net = full_access(n_seg=3)
    with pytest.raises(SimulationError, match="CFL"):
        Simulator(net, 60.0, Controls(demand=mainline_demand(net, 4000.0))).run(600.0)


def test_time_step_must_be_positive():
    with pytest.raises(ValueError):
        Simulator(full_access(), 0.0)
