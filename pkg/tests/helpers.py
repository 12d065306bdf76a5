"""Shared desk-scale instances and brute-force utilities for the tests."""

import itertools
import math

from hostcap.dccam import UncertaintyRealization
from hostcap.netmodel import parse_instance

# With s_mva = 1 and v_kv = sqrt(3), the impedance base is exactly 1 ohm, so
# the z_ohm entries below are already per-unit.
V3 = math.sqrt(3.0)


def zc(r, x):
    """Single-phase (phase A) impedance cell in the 3x3 instance layout."""
    return [[[r, x], None, None], [None, None, None], [None, None, None]]


def two_bus(theta_min=-0.2, theta_max=0.3, r=0.01, x=0.02):
    """One branch, one DG site, no load: the textbook voltage-rise feeder."""
    return parse_instance({
        "name": "two-bus",
        "bases": {"s_mva": 1.0, "v_kv": V3},
        "buses": [
            {"id": 1, "phases": "A", "is_root": True},
            {"id": 2, "phases": "A", "v_min_pu": 0.95, "v_max_pu": 1.05},
        ],
        "branches": [
            {"id": "1-2", "from": 1, "to": 2, "phases": "A",
             "z_ohm": zc(r, x), "s_max_mva": 1000.0, "switchable": False},
        ],
        "dg_sites": [
            {"bus": 2, "phases": "A", "theta_min": theta_min,
             "theta_max": theta_max},
        ],
        "curves": {"load": [1.0], "pv": [1.0]},
    })


def two_bus_loaded(dev_dg=0.2, dev_load=0.15, budget=1):
    """Two buses with a fixed-power-factor load next to the DG site."""
    return parse_instance({
        "name": "two-loaded",
        "bases": {"s_mva": 1.0, "v_kv": V3},
        "buses": [
            {"id": 1, "phases": "A", "is_root": True},
            {"id": 2, "phases": "A", "load_mw": {"A": 0.3},
             "load_mvar": {"A": 0.1}},
        ],
        "branches": [
            {"id": "1-2", "from": 1, "to": 2, "phases": "A",
             "z_ohm": zc(0.01, 0.02), "s_max_mva": 40.0},
        ],
        "dg_sites": [{"bus": 2, "phases": "A", "y_max_mw": 50.0,
                      "theta_min": 0.0, "theta_max": 0.0}],
        "curves": {"load": [1.0], "pv": [1.0]},
        "uncertainty": {"dev_dg": dev_dg, "dev_load": dev_load,
                        "budget": [budget]},
    })


def ring4(dev_dg=0.2, dev_load=0.25, budget=2):
    """Four buses on a ring (one tie switch), one DG site, three loads.

    Small enough that every spanning tree and every budget-feasible
    deviation vertex can be enumerated outright.
    """
    return parse_instance({
        "name": "ring4",
        "bases": {"s_mva": 1.0, "v_kv": V3},
        "buses": [
            {"id": 1, "phases": "A", "is_root": True},
            {"id": 2, "phases": "A", "load_mw": {"A": 0.4},
             "load_mvar": {"A": 0.15}},
            {"id": 3, "phases": "A", "load_mw": {"A": 0.3},
             "load_mvar": {"A": 0.1}},
            {"id": 4, "phases": "A", "load_mw": {"A": 0.5},
             "load_mvar": {"A": 0.2}},
        ],
        "branches": [
            {"id": "1-2", "from": 1, "to": 2, "phases": "A",
             "z_ohm": zc(0.02, 0.03), "s_max_mva": 6.0},
            {"id": "2-3", "from": 2, "to": 3, "phases": "A",
             "z_ohm": zc(0.025, 0.035), "s_max_mva": 6.0},
            {"id": "3-4", "from": 3, "to": 4, "phases": "A",
             "z_ohm": zc(0.02, 0.025), "s_max_mva": 6.0},
            {"id": "4-1", "from": 4, "to": 1, "phases": "A",
             "z_ohm": zc(0.015, 0.02), "s_max_mva": 6.0,
             "normally_open": True},
        ],
        "dg_sites": [
            {"bus": 3, "phases": "A", "y_max_mw": 30.0,
             "theta_min": -0.2, "theta_max": 0.3}
        ],
        "curves": {"load": [1.0], "pv": [1.0]},
        "uncertainty": {"dev_dg": dev_dg, "dev_load": dev_load,
                        "budget": [budget]},
    })


def vertex_realizations(blocks, budget):
    """All budget-feasible deviation vertices, up/down exclusivity respected."""
    names = sorted(an for blk in blocks.periods for an in blk.a_vars)
    pairs = {}
    for an in names:
        bus = an[an.index("[") + 1:an.index(",")]
        kind = an[1:an.index("[")]
        group = ("G" if kind.startswith("G") else "L") + bus
        pairs.setdefault(group, []).append(an)
    out = []
    for choice in itertools.product(*[[None] + v for v in pairs.values()]):
        act = [c for c in choice if c]
        if budget is None or len(act) <= budget:
            out.append(UncertaintyRealization(
                values={c: 1.0 for c in act},
                label="+".join(act) or "nominal"))
    return out
