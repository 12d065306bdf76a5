import copy
import json
import math

import pytest

import helpers
from hostcap import case33
from hostcap.netmodel import (ModelError, OltcParams, ParseError,
                              base_topology, is_radial, load_instance,
                              mw_to_pu, ohm_to_pu, parse_instance,
                              predicted_load, pu_to_mw, pu_to_ohm,
                              spanning_tree_parents)


def test_unit_conversions_round_trip():
    z = complex(0.4, 0.25)
    assert pu_to_ohm(ohm_to_pu(z, 10.0, 12.66), 10.0, 12.66) == pytest.approx(z)
    assert pu_to_mw(mw_to_pu(3.3, 10.0), 10.0) == pytest.approx(3.3)
    # with s_mva = 1 and v_kv = sqrt(3), one ohm is exactly one pu
    assert ohm_to_pu(1.0, 1.0, math.sqrt(3.0)) == pytest.approx(1.0)


def test_oltc_params():
    oltc = OltcParams(tau_min=0.95, delta_tau=0.02, tap_count=5)
    assert oltc.tau_max == pytest.approx(1.05)
    assert oltc.ratio(0) == pytest.approx(0.95)
    assert oltc.ratio(5) == pytest.approx(1.05)
    assert 0 <= oltc.neutral_tap <= 5
    assert abs(oltc.ratio(oltc.neutral_tap) - 1.0) <= oltc.delta_tau / 2 + 1e-12
    with pytest.raises(ModelError):
        oltc.ratio(6)
    with pytest.raises(ModelError):
        OltcParams(tau_min=0.95, delta_tau=-0.01, tap_count=5)


def test_parse_case33_shapes():
    inst = case33.ieee33()
    net, scen = inst.network, inst.scenario
    assert len(net.buses) == 33
    assert len(net.branches) == 37          # 32 tree branches + 5 tie lines
    assert net.roots == (1,)
    assert len(base_topology(net)) == 32
    assert scen.periods == tuple(range(1, 25))
    # voltage bounds arrive squared
    assert net.buses[5].u_min["A"] == pytest.approx(0.95 ** 2)
    assert net.buses[5].u_max["B"] == pytest.approx(1.05 ** 2)
    # the substation branch carries the tap changer
    assert net.branches["1-2"].transformer is not None
    assert net.branches["1-2"].transformer.tap_count == 5


def test_predicted_load_follows_shape():
    inst = case33.ieee33()
    base = inst.network.buses[5].load["A"]
    for t in (1, 13, 20):
        expected = base * inst.scenario.load_shape[t - 1]
        assert predicted_load(inst.network, inst.scenario, 5, "A", t) == expected
    # no load entry means zero demand
    assert predicted_load(inst.network, inst.scenario, 1, "A", 13) == 0j


def test_scenario_helpers():
    scen = case33.ieee33().scenario
    assert scen.budget_of(13) is None
    two = scen.with_deviations(dev_dg=0.05)
    assert two.dev_dg == 0.05 and two.dev_load == scen.dev_load
    capped = scen.with_budget(2)
    assert all(capped.budget_of(t) == 2 for t in capped.periods)
    sub = scen.with_periods((13,))
    assert sub.periods == (13,)
    assert sub.eta(10, "A", 13) == scen.eta(10, "A", 13)


def test_radiality_checks():
    inst = helpers.ring4()
    net = inst.network
    base = base_topology(net)
    assert base == frozenset({"1-2", "2-3", "3-4"})
    assert is_radial(net, base)
    full = base | {"4-1"}
    assert not is_radial(net, full)         # count check refuses the cycle
    assert not is_radial(net, base - {"2-3"})
    # swapping the open branch yields another valid spanning tree
    assert is_radial(net, frozenset({"1-2", "3-4", "4-1"}))


def test_radiality_diagnostics_on_case33():
    net = case33.ieee33().network
    base = base_topology(net)
    # one swap that reconnects: still a spanning tree
    assert is_radial(net, base - {"3-4"} | {"8-21"})
    # a swap inside the severed side leaves it disconnected and cycles it
    diag = is_radial(net, base - {"3-4"} | {"18-33"})
    assert not diag and (diag.disconnected or diag.cycle_branches)


def test_spanning_tree_parents_orders_root_first():
    inst = helpers.ring4()
    parent, order = spanning_tree_parents(inst.network,
                                          frozenset({"1-2", "2-3", "3-4"}))
    assert order[0] == 1 and parent[1] == (None, None)
    assert parent[4] == (3, "3-4")
    # children always appear after their parent
    pos = {b: k for k, b in enumerate(order)}
    for bus, (par, _) in parent.items():
        if par is not None:
            assert pos[par] < pos[bus]


def test_parse_rejects_bad_instances():
    raw = case33.ieee33_raw()
    broken = copy.deepcopy(raw)
    broken["branches"][0]["to"] = 99
    with pytest.raises(ParseError, match="not a known bus"):
        parse_instance(broken)
    broken = copy.deepcopy(raw)
    broken["buses"][1]["load_mw"] = {"D": 1.0}
    with pytest.raises(ParseError):
        parse_instance(broken)


def test_load_instance_round_trip(tmp_path, instance_file):
    inst = load_instance(instance_file)
    built = case33.ieee33()
    assert inst.network.branches.keys() == built.network.branches.keys()
    assert inst.scenario.load_shape == built.scenario.load_shape
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ParseError):
        load_instance(bad)
    missing = tmp_path / "missing.json"
    with pytest.raises(ParseError):
        load_instance(missing)
    # schema violation: buses must be a list
    obj = json.loads(instance_file.read_text())
    obj["buses"] = {}
    wrong = tmp_path / "wrong.json"
    wrong.write_text(json.dumps(obj))
    with pytest.raises(ParseError):
        load_instance(wrong)
