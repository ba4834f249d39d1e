import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mlsim.link import (
    DENSITY_RTOL,
    FundamentalDiagram,
    LinkState,
    demand,
    friction_adjust,
    friction_kernel,
    metastate,
    receiving,
    sending,
    speed,
    supply,
    update_metastate,
)


def test_sending_capacity_limited():
    out = np.empty(1)
    sending(np.array([10.0]), 0.5, 4.0, out)
    assert out[0] == pytest.approx(0.5 * 10 * 4 / 5, rel=1e-15)


def test_sending_empty_link():
    out = np.ones(3)
    sending(np.zeros(3), 0.5, 4.0, out)
    assert (out == 0).all()


def test_sending_uncongested_keeps_class_mix():
    out = np.empty(2)
    sending(np.array([3.0, 1.0]), 0.1, 10.0, out)
    assert out[0] == 0.1 * 3.0 and out[1] == 0.1 * 1.0


def test_receiving_branches():
    assert receiving(60.0, 0, 7.0, 0.1, 100.0) == 7.0
    assert receiving(60.0, 1, 7.0, 0.1, 100.0) == pytest.approx(4.0, rel=1e-14)
    assert receiving(100.0, 1, 7.0, 0.1, 100.0) == 0.0
    assert receiving(120.0, 1, 7.0, 0.1, 100.0) == 0.0


def test_metastate_transitions():
    fd = FundamentalDiagram.from_lane_values(1, 1800, 70, 150)
    lo, hi = fd.low_critical_density, fd.high_critical_density
    assert metastate(0.0, 1, lo, hi) == 0
    assert metastate(hi * 1.01, 0, lo, hi) == 1
    mid = 0.5 * (lo + hi)
    assert metastate(mid, 1, lo, hi) == 1
    assert metastate(mid, 0, lo, hi) == 0
    assert metastate(hi, 0, lo, hi) == 0
    # a one-ulp overshoot of the high critical density does not congest the link
    assert metastate(np.nextafter(hi, np.inf), 0, lo, hi) == 0
    assert metastate(hi * (1 + 10 * DENSITY_RTOL), 0, lo, hi) == 1


def test_critical_densities():
    fd = FundamentalDiagram.from_lane_values(3, 1900, 65, 150)
    assert fd.congestion_wave_speed == 13.0
    assert fd.low_critical_density == pytest.approx(13 * 450 / 78)
    assert fd.high_critical_density == pytest.approx(5700 / 65)
    fd.check()


def test_check_rejects_bad_diagrams():
    with pytest.raises(ValueError):
        FundamentalDiagram(0, 65, 13, 150).check()
    with pytest.raises(ValueError, match="jam density"):
        FundamentalDiagram(1900, 65, 13, 20).check()
    with pytest.raises(ValueError, match="exceeds"):
        FundamentalDiagram(300, 65, 13, 150).check()


def test_speed_from_outflow():
    s = LinkState(np.array([20.0]))  # 10 vehicles on half a mile
    assert speed(s, [5.0], 65.0, 1 / 140) == pytest.approx(35.0, rel=1e-14)
    assert speed(LinkState(np.zeros(2)), [0.0], 65.0, 1 / 140) == 65.0
    assert speed(s, [0.0], 65.0, 1 / 140) == 0.0


def test_public_wrappers_match_kernels():
    fd = FundamentalDiagram.from_lane_values(2, 1900, 65, 150)
    dt = 5 / 3600
    s = LinkState(np.array([100.0, 40.0]), theta=1)
    out = np.empty(2)
    sending(s.densities, fd.free_flow_speed * dt, fd.capacity * dt, out)
    np.testing.assert_array_equal(demand(fd, s, dt), out)
    assert supply(fd, s, dt) == fd.congestion_wave_speed * dt * (fd.jam_density - 140.0)
    assert update_metastate(fd, s) == 1


def test_friction_example_values():
    ml = FundamentalDiagram.from_lane_values(1, 1800, 70, 150)
    adj = friction_adjust(ml, 0.4, 30.0, 70.0, LinkState(np.array([5.0])), 65.0)
    assert adj.active
    assert adj.delta == 40.0
    assert adj.free_flow_speed == 54.0
    assert adj.capacity == 54.0 * ml.high_critical_density


def test_friction_off_without_sigma_or_gp_congestion():
    ml = FundamentalDiagram.from_lane_values(1, 1800, 70, 150)
    st0 = LinkState(np.array([5.0]))
    assert not friction_adjust(ml, 0.0, 30.0, 70.0, st0, 65.0).active
    assert not friction_adjust(ml, 0.4, 65.0, 70.0, st0, 65.0).active
    # GP faster than the managed lane itself: no differential to act on
    assert not friction_adjust(ml, 0.4, 40.0, 35.0, st0, 65.0).active
    with pytest.raises(ValueError):
        friction_adjust(ml, 1.5, 30.0, 70.0, st0, 65.0)


def test_friction_guard_blocks_dense_managed_lane():
    ml = FundamentalDiagram.from_lane_values(1, 1800, 70, 150)
    v_hat = 54.0
    threshold = v_hat * ml.high_critical_density / 30.0
    assert friction_adjust(ml, 0.4, 30.0, 70.0, LinkState(np.array([threshold * 0.999])), 65.0).active
    assert not friction_adjust(ml, 0.4, 30.0, 70.0, LinkState(np.array([threshold * 1.001])), 65.0).active


@given(
    sigma=st.floats(0.01, 1.0),
    v_gp=st.floats(0.0, 64.0),
    v_ml_prev=st.floats(0.0, 70.0),
    total=st.floats(0.0, 150.0),
)
def test_friction_never_slows_managed_lane_below_gp(sigma, v_gp, v_ml_prev, total):
    n_hi = 1800 / 70
    active, v_hat, F_hat, _ = friction_kernel(sigma, 70.0, n_hi, total, v_gp, 65.0, v_ml_prev)
    if active:
        implied = v_hat if total <= 0 else min(v_hat, F_hat / total)
        assert implied >= v_gp * (1 - 1e-12)
        assert v_hat <= 70.0
