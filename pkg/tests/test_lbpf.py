"""Exactness and accuracy ordering of the two linear flow models."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import helpers
from hostcap import sweep
from hostcap.lbpf import OperatingPoint, build_lbpf2, lbpf1_coeffs, linear_solve
from hostcap.netmodel import ModelError, parse_instance, predicted_load
from hostcap.sweep import InjectionSet


def load_case(network, scenario, t, scale=1.0):
    """Injection set with the period-t forecast demand at the given scale."""
    s_inj = {}
    for i, bus in network.buses.items():
        for ph in bus.phases:
            dem = predicted_load(network, scenario, i, ph, t)
            if dem:
                s_inj.setdefault(i, {})[ph] = -scale * dem
    return InjectionSet(s_inj=s_inj)


def max_voltage_error(network, exact, lin):
    return max(abs(math.sqrt(max(lin.u[i][ph], 0.0)) - abs(exact.v[i][ph]))
               for i, bus in network.buses.items() for ph in bus.phases)


def anchored_solve(network, injections):
    """Exact state plus the level-2 linear solution anchored at it."""
    exact = sweep.solve(network, injections)
    coeffs = build_lbpf2(network, OperatingPoint.from_state(network, exact))
    return exact, linear_solve(network, coeffs, injections), coeffs


def test_lossless_drop_matches_hand_formula():
    inst = helpers.two_bus(r=0.01, x=0.02)
    inj = InjectionSet(s_inj={2: {"A": complex(-1.0, -0.5)}})
    lin = linear_solve(inst.network, lbpf1_coeffs(inst.network), inj)
    # u2 = u1 - 2(r p + x q) = 1 - 2(0.01*1 + 0.02*0.5)
    assert lin.u[2]["A"] == pytest.approx(0.96, abs=1e-12)
    assert lin.p["1-2"]["A"] == pytest.approx(1.0, abs=1e-12)

    idle = linear_solve(inst.network, lbpf1_coeffs(inst.network),
                        InjectionSet(s_inj={}))
    assert idle.u[2]["A"] == pytest.approx(1.0, abs=1e-12)


def test_lossless_model_conserves_power():
    inst = helpers.ring4()
    net = inst.network
    s_inj = {2: {"A": complex(-0.4, -0.15)},
             3: {"A": complex(-0.3, -0.1)},
             4: {"A": complex(-0.5, -0.2)}}
    coeffs = lbpf1_coeffs(net)
    lin = linear_solve(net, coeffs, InjectionSet(s_inj=s_inj))
    assert lin.total_loss(coeffs) == 0
    # identity balance: the feeder head carries exactly the summed demand
    total = -sum(v["A"] for v in s_inj.values())
    assert lin.p["1-2"]["A"] == pytest.approx(total.real, abs=1e-12)
    assert lin.q["1-2"]["A"] == pytest.approx(total.imag, abs=1e-12)
    # and the last branch carries only the tail load
    assert lin.p["3-4"]["A"] == pytest.approx(0.5, abs=1e-12)


def test_anchored_model_exact_at_center_desk():
    inst = helpers.ring4()
    inj = InjectionSet(s_inj={2: {"A": complex(-0.4, -0.15)},
                              3: {"A": complex(0.8, 0.1)},
                              4: {"A": complex(-0.5, -0.2)}})
    exact, lin, coeffs = anchored_solve(inst.network, inj)
    assert max_voltage_error(inst.network, exact, lin) < 1e-10
    for bid in lin.closed:
        for ph in inst.network.branches[bid].phases:
            assert lin.p[bid][ph] == pytest.approx(exact.s_send[bid][ph].real,
                                                   abs=1e-10)
            assert lin.q[bid][ph] == pytest.approx(exact.s_send[bid][ph].imag,
                                                   abs=1e-10)
    # the linear loss estimate at the center equals the exact loss
    assert complex(lin.total_loss(coeffs)) == pytest.approx(
        complex(exact.total_loss()), abs=1e-10)


@pytest.mark.parametrize("tap", [0, 2, 5])
def test_anchored_model_exact_at_center_with_taps(ieee33, ieee33_scenario, tap):
    net = ieee33.network
    inj = InjectionSet(s_inj=load_case(net, ieee33_scenario, 20).s_inj,
                       taps={"1-2": tap})
    exact, lin, _ = anchored_solve(net, inj)
    assert max_voltage_error(net, exact, lin) < 1e-10


def test_center_residuals_random_cases(ieee33):
    """Row-level residuals of the anchored model vanish at its center."""
    net = ieee33.network
    rng = np.random.default_rng(11)
    worst_u = worst_s = 0.0
    for _ in range(30):
        s_inj = {}
        for i, bus in net.buses.items():
            if bus.is_root:
                continue
            for ph in bus.phases:
                s_inj.setdefault(i, {})[ph] = complex(
                    rng.uniform(-0.08, 0.04), rng.uniform(-0.03, 0.02))
        exact = sweep.solve(net, InjectionSet(s_inj=s_inj))
        coeffs = build_lbpf2(net, OperatingPoint.from_state(net, exact))
        for bid in exact.closed:
            br = net.branches[bid]
            lin = coeffs.per_branch[bid]
            tau2 = 1.0
            if br.transformer is not None:
                tau2 = br.transformer.ratio(exact.taps[bid]) ** 2
            p = np.array([exact.s_send[bid][ph].real for ph in br.phases])
            q = np.array([exact.s_send[bid][ph].imag for ph in br.phases])
            u_f = np.array([exact.u(br.from_bus, ph) for ph in br.phases])
            u_t = np.array([exact.u(br.to_bus, ph) for ph in br.phases])
            drop = u_f - tau2 * u_t - (lin.g_u @ p + lin.b_u @ q - lin.l_u)
            worst_u = max(worst_u, float(np.max(np.abs(drop))))
            recv = np.array([exact.s_send[bid][ph] - exact.loss[bid][ph]
                             for ph in br.phases])
            worst_s = max(
                worst_s,
                float(np.max(np.abs(recv.real - lin.received_p(p, q)))),
                float(np.max(np.abs(recv.imag - lin.received_q(p, q)))))
    assert worst_u < 1e-10
    assert worst_s < 1e-10


def test_error_decays_quadratically_with_distance(ieee33, ieee33_scenario):
    """Halving the distance from the anchor quarters the voltage error."""
    net = ieee33.network
    nominal = load_case(net, ieee33_scenario, 20)
    coeffs = build_lbpf2(
        net, OperatingPoint.from_state(net, sweep.solve(net, nominal)))
    errs = []
    for scale in (1.4, 1.2, 1.1):
        probe = load_case(net, ieee33_scenario, 20, scale=scale)
        exact = sweep.solve(net, probe)
        errs.append(max_voltage_error(net, exact, linear_solve(net, coeffs,
                                                               probe)))
    assert errs[1] < 0.35 * errs[0]
    assert errs[2] < 0.35 * errs[1]
    assert errs[2] > 0


def test_accuracy_ordering_across_loading_scales(ieee33, ieee33_scenario):
    """Anchored per scale, the level-2 model beats level-1 at every scale."""
    net = ieee33.network
    lossless = lbpf1_coeffs(net)
    for scale in (0.2, 0.6, 1.0, 1.5):
        inj = load_case(net, ieee33_scenario, 20, scale=scale)
        exact, lin2, coeffs2 = anchored_solve(net, inj)
        err1 = max_voltage_error(net, exact, linear_solve(net, lossless, inj))
        err2 = max_voltage_error(net, exact, lin2)
        assert err2 < err1 / 10
        if scale == 1.0:
            assert err2 < err1 / 100
            assert 1e-3 < err1 < 1e-2
        # loss tracking: exact at the anchor, identically zero for level 1
        exact_loss = exact.total_loss().real
        assert abs(complex(lin2.total_loss(coeffs2)).real - exact_loss) \
            <= 0.05 * exact_loss
        assert linear_solve(net, lossless, inj).total_loss(lossless) == 0


def balanced_pair():
    cell = [[0.01, 0.02], [0.002, 0.004], [0.002, 0.004]]
    z = [list(cell), [cell[1], cell[0], cell[2]], [cell[1], cell[2], cell[0]]]
    return parse_instance({
        "name": "balanced-pair",
        "bases": {"s_mva": 1.0, "v_kv": helpers.V3},
        "buses": [
            {"id": 1, "phases": "ABC", "is_root": True},
            {"id": 2, "phases": "ABC", "load_mw": {p: 0.2 for p in "ABC"},
             "load_mvar": {p: 0.08 for p in "ABC"}},
        ],
        "branches": [
            {"id": "1-2", "from": 1, "to": 2, "phases": "ABC",
             "z_ohm": z, "s_max_mva": 10.0, "switchable": False},
        ],
        "dg_sites": [],
        "curves": {"load": [1.0], "pv": [1.0]},
    })


def test_balanced_network_keeps_phases_equal():
    inst = balanced_pair()
    load = complex(-0.2, -0.08)
    inj = InjectionSet(s_inj={2: {p: load for p in "ABC"}})
    _, lin2, _ = anchored_solve(inst.network, inj)
    lin1 = linear_solve(inst.network, lbpf1_coeffs(inst.network), inj)
    for lin in (lin1, lin2):
        vals = sorted(lin.u[2].values())
        assert vals[-1] - vals[0] < 1e-12


def test_anchor_rejects_zero_voltage_phase():
    inst = helpers.two_bus()
    op = OperatingPoint(v0={"1-2": np.array([0j])},
                        p0={"1-2": np.zeros(1)}, q0={"1-2": np.zeros(1)},
                        closed=frozenset({"1-2"}), taps={})
    with pytest.raises(ModelError, match="zero phase"):
        build_lbpf2(inst.network, op)


def test_linear_solve_rejects_mismatched_case(ieee33, ieee33_scenario):
    inst = helpers.ring4()
    coeffs = lbpf1_coeffs(inst.network)
    other = frozenset({"1-2", "2-3", "4-1"})
    with pytest.raises(ModelError, match="closed set"):
        linear_solve(inst.network, coeffs,
                     InjectionSet(s_inj={}, closed=other))

    net = ieee33.network
    inj = load_case(net, ieee33_scenario, 20)
    pinned = lbpf1_coeffs(net, taps={"1-2": 1})
    with pytest.raises(ModelError, match="tap"):
        linear_solve(net, pinned,
                     InjectionSet(s_inj=inj.s_inj, taps={"1-2": 4}))


@settings(max_examples=40, deadline=None)
@given(p=st.floats(-1.5, 2.0), q=st.floats(-0.8, 0.8))
def test_center_exactness_property(p, q):
    inst = helpers.two_bus_loaded()
    inj = InjectionSet(s_inj={2: {"A": complex(p, q)}})
    exact, lin, _ = anchored_solve(inst.network, inj)
    assert abs(lin.u[2]["A"] - exact.u(2, "A")) < 1e-10
