import cmath
import math

import numpy as np
import pytest

import helpers
import zbus_reference
from hostcap import case33, sweep
from hostcap.netmodel import base_topology
from hostcap.sweep import InjectionSet, SweepError


def quadratic_u2(s_load, z):
    """Exact squared voltage at the receiving end of a single branch.

    From V2 * conj(V2) = conj(V2) - z * conj(S): the squared magnitude solves
    u^2 + (2a - 1)u + a^2 + b^2 = 0 with a + jb = z * conj(S).
    """
    w = z * s_load.conjugate()
    a, b = w.real, w.imag
    disc = (1 - 2 * a) ** 2 - 4 * (a * a + b * b)
    return ((1 - 2 * a) + math.sqrt(disc)) / 2


def test_single_branch_matches_closed_form():
    inst = helpers.two_bus_loaded()
    s_load = complex(0.3, 0.1)
    inj = InjectionSet(s_inj={2: {"A": -s_load}})
    state = sweep.solve(inst.network, inj)
    assert state.u(2, "A") == pytest.approx(quadratic_u2(s_load, 0.01 + 0.02j),
                                            abs=1e-12)
    # reversing into generation raises the voltage above 1
    gen = InjectionSet(s_inj={2: {"A": complex(2.0, 0.0)}})
    assert sweep.solve(inst.network, gen).u(2, "A") > 1.0


def test_loss_equals_injection_mismatch():
    """Total series loss must equal net power entering minus power consumed."""
    inst = helpers.ring4()
    s_inj = {2: {"A": complex(-0.4, -0.15)},
             3: {"A": complex(0.8, 0.1)},
             4: {"A": complex(-0.5, -0.2)}}
    state = sweep.solve(inst.network, InjectionSet(s_inj=s_inj))
    root_out = sum(state.s_send[bid]["A"] for bid in ("1-2",))
    consumed = -sum(v["A"] for v in s_inj.values())
    assert state.total_loss() == pytest.approx(root_out - consumed, abs=1e-9)


def test_equation_residuals_tiny_on_case33(ieee33, ieee33_scenario):
    from hostcap.netmodel import predicted_load
    net = ieee33.network
    s_inj = {}
    for i, bus in net.buses.items():
        for ph in bus.phases:
            dem = predicted_load(net, ieee33_scenario, i, ph, 20)
            if dem:
                s_inj.setdefault(i, {})[ph] = -dem
    inj = InjectionSet(s_inj=s_inj)
    state = sweep.solve(net, inj)
    res_s, res_u = sweep.equation_residuals(net, state, inj)
    assert res_s < 1e-8 and res_u < 1e-8


def test_matches_zbus_reference_with_taps(ieee33):
    net = ieee33.network
    rng = np.random.default_rng(7)
    for tap in (0, 3, 5):
        s_inj = {}
        for i, bus in net.buses.items():
            if bus.is_root:
                continue
            for ph in bus.phases:
                s_inj.setdefault(i, {})[ph] = complex(rng.uniform(-0.1, 0.05),
                                                      rng.uniform(-0.04, 0.02))
        inj = InjectionSet(s_inj=s_inj, taps={"1-2": tap})
        state = sweep.solve(net, inj)
        ref = zbus_reference.solve(net, inj)
        diff = max(abs(state.v[i][ph] - ref[i][ph])
                   for i, bus in net.buses.items() for ph in bus.phases)
        assert diff < 1e-8


def test_alternate_topology_and_three_phase_balance(ieee33):
    net = ieee33.network
    closed = base_topology(net) - {"3-4"} | {"8-21"}
    inj = InjectionSet(s_inj={18: {"A": 0.06, "B": 0.06, "C": 0.06}},
                       closed=closed)
    state = sweep.solve(net, inj)
    # a balanced case keeps the three phase magnitudes equal
    mags = [abs(state.v[18][ph]) for ph in "ABC"]
    assert max(mags) - min(mags) < 1e-9
    # and the phase angles 120 degrees apart
    ang = [cmath.phase(state.v[18][ph]) for ph in "ABC"]
    assert (ang[0] - ang[1]) % (2 * math.pi) == pytest.approx(2 * math.pi / 3)


def test_rejects_non_radial_and_divergence():
    inst = helpers.ring4()
    all_closed = frozenset(inst.network.branches)
    with pytest.raises(Exception):
        sweep.solve(inst.network, InjectionSet(s_inj={}, closed=all_closed))
    # a load far beyond the feeder's deliverable power cannot converge
    with pytest.raises(SweepError):
        sweep.solve(inst.network,
                    InjectionSet(s_inj={4: {"A": complex(-500.0, -200.0)}}))


def test_violation_report_orders_by_excess():
    inst = helpers.two_bus_loaded()
    state = sweep.solve(inst.network,
                        InjectionSet(s_inj={2: {"A": complex(8.0, 0.0)}}))
    report = sweep.violation_report(inst.network, state)
    assert report and report[0].excess == max(v.excess for v in report)
    kinds = {v.kind for v in report}
    assert "overvoltage" in kinds
    clean = sweep.solve(inst.network, InjectionSet(s_inj={}))
    assert sweep.violation_report(inst.network, clean) == []
