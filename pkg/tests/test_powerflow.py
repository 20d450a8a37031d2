import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acrestore.diagnostics import fd_jacobian, random_state
from acrestore.errors import PowerFlowError
from acrestore.network import network_from_dict
from acrestore.powerflow import (
    Channel,
    MeasurementLayout,
    PowerFlowSpec,
    StateVector,
    channel_from_json,
    channel_to_json,
    evaluate_h,
    injections_ybus,
    jacobian_H,
    power_flow_mismatch,
    solve_power_flow,
    standard_layout,
)

from conftest import phasor_oracle


def _line_case(g_sh=0.0, b_sh=0.0):
    return network_from_dict(
        {
            "buses": [
                {"id": 1, "kind": "slack", "pd": 0.0, "qd": 0.0, "gs": 0.0, "bs": 0.0},
                {"id": 2, "kind": "pq", "pd": 0.0, "qd": 0.0, "gs": 0.0, "bs": 0.0},
            ],
            "lines": [
                {"from": 1, "to": 2, "r": 0.01, "x": 0.1, "gsh_from": g_sh, "bsh_from": b_sh, "gsh_to": g_sh, "bsh_to": b_sh}
            ],
        }
    )


def test_two_bus_flow_value():
    net = _line_case()
    x = StateVector([-0.1], [1.05, 1.0], 0)  # theta_1 - theta_2 = 0.1
    layout = MeasurementLayout((Channel("Pf", (0, "forward")),))
    pf = evaluate_h(net, x, layout)[0]
    v1, v2 = 1.05, np.exp(-0.1j)
    y = 1 / complex(0.01, 0.1)
    assert pf == pytest.approx((v1 * np.conj(y * (v1 - v2))).real, abs=1e-12)
    # hand evaluation: V1^2 G - V1 V2 (G cos 0.1 + B sin 0.1)
    g, b = 0.990099, -9.90099
    hand = 1.05**2 * g - 1.05 * (g * np.cos(0.1) + b * np.sin(0.1))
    assert pf == pytest.approx(hand, abs=1e-6)
    assert pf == pytest.approx(1.09505, abs=1e-5)


def test_flat_start_flows_equal_shunt():
    net = _line_case(g_sh=0.03, b_sh=0.05)
    x = StateVector.flat(net)
    h = evaluate_h(net, x, standard_layout(net, quantities=("Pf", "Qf")))
    assert np.allclose(h[:2], 0.03, atol=1e-15)
    assert np.allclose(h[2:], -0.05, atol=1e-15)


def test_identity_channels(case5):
    rng = np.random.default_rng(0)
    x = random_state(case5, rng)
    lay = standard_layout(case5, quantities=("V", "theta"))
    h = evaluate_h(case5, x, lay)
    assert np.array_equal(h[:5], x.magnitudes)
    assert np.array_equal(h[5:], x.angles)
    H = jacobian_H(case5, x, lay)
    assert np.array_equal(H[:5, 4:], np.eye(5))
    assert np.array_equal(H[:5, :4], np.zeros((5, 4)))
    assert np.array_equal(H[5:, :4], np.eye(4))


def test_flat_start_flow_angle_derivative():
    net = _line_case()
    y = 1 / complex(0.01, 0.1)
    x = StateVector.flat(net)
    # slack is bus 0, so use the reverse flow: from-angle is bus 1 (state column 0)
    H = jacobian_H(net, x, MeasurementLayout((Channel("Pf", (0, "reverse")),)))
    assert H[0, 0] == pytest.approx(-y.imag, rel=1e-12)
    net2 = network_from_dict(
        {
            "buses": [
                {"id": 1, "kind": "pq", "pd": 0.0, "qd": 0.0, "gs": 0.0, "bs": 0.0},
                {"id": 2, "kind": "slack", "pd": 0.0, "qd": 0.0, "gs": 0.0, "bs": 0.0},
            ],
            "lines": [{"from": 1, "to": 2, "r": 0.01, "x": 0.1}],
        }
    )
    H2 = jacobian_H(net2, StateVector.flat(net2), MeasurementLayout((Channel("Pf", (0, "forward")),)))
    assert H2[0, 0] == pytest.approx(-y.imag, rel=1e-12)
    # to-angle entry is sign flipped: Pf_21 seen from bus 1's angle
    H3 = jacobian_H(net2, StateVector.flat(net2), MeasurementLayout((Channel("Pf", (0, "reverse")),)))
    assert H3[0, 0] == pytest.approx(y.imag, rel=1e-12)


@pytest.mark.parametrize("name", ["case2", "case5", "case14"])
def test_h_matches_phasor_oracle(networks, name):
    net = networks[name]
    rng = np.random.default_rng(3)
    layout = standard_layout(net)
    for _ in range(5):
        x = random_state(net, rng)
        s_bus, flows = phasor_oracle(net, x)
        h = evaluate_h(net, x, layout)
        n, e = net.n_bus, net.n_line
        assert np.allclose(h[n : 2 * n], s_bus.real, atol=1e-12)
        assert np.allclose(h[2 * n : 3 * n], s_bus.imag, atol=1e-12)
        assert np.allclose(h[3 * n : 3 * n + 2 * e], flows.real, atol=1e-12)
        assert np.allclose(h[3 * n + 2 * e : 3 * n + 4 * e], flows.imag, atol=1e-12)
        s_y = injections_ybus(net, x)
        assert np.allclose(s_y, s_bus, atol=1e-12)


def test_bus_shunt_toggle(case14):
    k = case14.index_of(9)
    assert case14.buses[k].b_shunt == pytest.approx(0.19)
    x = random_state(case14, np.random.default_rng(1))
    lay = standard_layout(case14, quantities=("Q",))
    with_sh = evaluate_h(case14, x, lay)
    without = evaluate_h(case14.with_bus_shunt_in_h(False), x, lay)
    expected = np.zeros(14)
    expected[k] = -0.19 * x.magnitudes[k] ** 2
    assert np.allclose(with_sh - without, expected, atol=1e-14)
    off = case14.with_bus_shunt_in_h(False)
    assert np.allclose(injections_ybus(off, x).imag, without, atol=1e-12)


@pytest.mark.parametrize("name", ["case2", "case5", "case14"])
def test_jacobian_matches_fd(networks, name):
    net = networks[name]
    rng = np.random.default_rng(11)
    layout = standard_layout(net)
    for _ in range(20):
        x = random_state(net, rng)
        fd = fd_jacobian(net, x, layout)
        err = np.abs(jacobian_H(net, x, layout) - fd) / (1 + np.abs(fd))
        assert err.max() < 1e-6


def _permuted_case(network, perm):
    """Same grid with buses listed in a different order (external ids kept)."""
    d = network.to_dict()
    d["buses"] = [d["buses"][k] for k in perm]
    return network_from_dict(d)


def test_permutation_equivariance(case5):
    perm = [3, 0, 4, 2, 1]
    other = _permuted_case(case5, perm)
    x = random_state(case5, np.random.default_rng(2))
    theta, vm = x.full_angles(), x.magnitudes
    y = StateVector.from_bus_values(theta[perm], vm[perm], other.slack)
    lay_a = standard_layout(case5)
    h_a = dict(zip([(c.quantity, _ext(case5, c)) for c in lay_a], evaluate_h(case5, x, lay_a)))
    lay_b = standard_layout(other)
    h_b = dict(zip([(c.quantity, _ext(other, c)) for c in lay_b], evaluate_h(other, y, lay_b)))
    assert h_a.keys() == h_b.keys()
    for key in h_a:
        assert h_a[key] == pytest.approx(h_b[key], abs=1e-13)
    # Jacobian entries agree once rows and columns are matched by external labels
    Ha = jacobian_H(case5, x, lay_a)
    Hb = jacobian_H(other, y, lay_b)
    cols_a = _state_labels(case5)
    cols_b = _state_labels(other)
    rows_b = {k: r for r, k in enumerate((c.quantity, _ext(other, c)) for c in lay_b)}
    for r, c in enumerate(lay_a):
        rb = rows_b[(c.quantity, _ext(case5, c))]
        for ca, label in enumerate(cols_a):
            assert Ha[r, ca] == pytest.approx(Hb[rb, cols_b.index(label)], abs=1e-12)


def _ext(net, c):
    if c.quantity in ("Pf", "Qf"):
        return c.location
    return net.buses[c.location].id


def _state_labels(net):
    ids = net.bus_ids
    return [("theta", ids[k]) for k in range(net.n_bus) if k != net.slack] + [("V", i) for i in ids]


def test_pf_zero_demand_flat(case2):
    net = case2.with_demand([0.0, 0.0], [0.0, 0.0])
    res = solve_power_flow(net, PowerFlowSpec.nominal(net))
    assert res.iterations <= 2
    assert np.allclose(res.state.to_array(), StateVector.flat(net).to_array(), atol=1e-12)


def test_pf_two_bus_demand(case2):
    res = solve_power_flow(case2, PowerFlowSpec.nominal(case2))
    h = evaluate_h(case2, res.state, standard_layout(case2, quantities=("P", "Q")))
    assert h[1] == pytest.approx(-0.5, abs=1e-6)
    assert h[3] == pytest.approx(-0.2, abs=1e-6)


def test_pf_infeasible_demand(case2):
    net = case2.with_demand([0.0, 50.0], [0.0, 20.0])
    with pytest.raises(PowerFlowError) as info:
        solve_power_flow(net, PowerFlowSpec.nominal(net))
    assert info.value.best is not None
    assert info.value.mismatch > 1e-6


def test_pf_case14_nominal(case14):
    spec = PowerFlowSpec.nominal(case14)
    res = solve_power_flow(case14, spec, tol=1e-10)
    assert np.max(np.abs(power_flow_mismatch(case14, res.state, spec))) <= 1e-10
    gen = case14.generator_buses()
    assert np.allclose(res.state.magnitudes[gen], spec.v_set[gen])


@settings(max_examples=25, deadline=None)
@given(scale=st.floats(0.2, 1.6), qscale=st.floats(0.0, 1.5))
def test_pf_solution_rechecks(case5, scale, qscale):
    pd, qd = case5.demand()
    net = case5.with_demand(pd * scale, qd * qscale)
    spec = PowerFlowSpec.nominal(net)
    res = solve_power_flow(net, spec, tol=1e-8)
    assert np.max(np.abs(power_flow_mismatch(net, res.state, spec))) <= 1e-8
    # independent re-check through the bus admittance matrix
    s = injections_ybus(net, res.state)
    non_slack = np.arange(net.n_bus) != net.slack
    assert np.max(np.abs(s.real - spec.p_inj)[non_slack]) <= 1e-7


def test_state_json_round_trip(case14):
    x = random_state(case14, np.random.default_rng(5))
    again = StateVector.from_json(x.to_json(case14), case14)
    assert np.allclose(again.to_array(), x.to_array(), atol=1e-15)
    assert x.to_json(case14)["slack"] == 1


def test_from_bus_values_rereferences():
    x = StateVector.from_bus_values([0.3, 0.1, -0.2], [1.0, 1.0, 1.0], 1)
    assert np.allclose(x.full_angles(), [0.2, 0.0, -0.3])


def test_state_shape_checked():
    with pytest.raises(ValueError):
        StateVector([0.0, 0.0], [1.0, 1.0], 0)


def test_channel_json_round_trip(case5):
    for c in standard_layout(case5):
        assert channel_from_json(channel_to_json(c, case5), case5, c.source) == c


def test_slack_theta_channel_rejected(case5):
    lay = MeasurementLayout((Channel("theta", case5.slack),))
    with pytest.raises(ValueError):
        evaluate_h(case5, StateVector.flat(case5), lay)


def test_layout_fingerprint_changes_with_source(case5):
    lay = standard_layout(case5)
    assert lay.fingerprint() != lay.relabel("other").fingerprint()
    assert len(lay) == 5 + 5 + 5 + 12 + 12 + 4
