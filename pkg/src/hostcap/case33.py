"""Reconstructed three-phase 33-bus test feeder.

Starts from the classic 12.66 kV 33-bus benchmark (32 tree branches plus five
normally-open link lines) and adds the devices used throughout this package:

* an on-load tap changer in branch 1-2 (5 steps, ratio 0.95..1.05),
* four PV connection sites: bus 10 (three-phase), bus 17 (phase A),
  bus 22 (phases AB), bus 32 (phase A),
* static var compensators at buses 3 and 30, switched capacitors at 14 and 26,
* per-phase load splits that make the feeder unbalanced, and modest mutual
  impedances between phases.

The builder emits the plain-dict form of the instance file so the shipped
JSON and the in-memory object can never drift apart.
"""

from __future__ import annotations

import json
import math

from .netmodel import parse_instance

# from, to, R_ohm, X_ohm for the 32 tree branches
_TREE = [
    (1, 2, 0.0922, 0.0470),
    (2, 3, 0.4930, 0.2511),
    (3, 4, 0.3660, 0.1864),
    (4, 5, 0.3811, 0.1941),
    (5, 6, 0.8190, 0.7070),
    (6, 7, 0.1872, 0.6188),
    (7, 8, 0.7114, 0.2351),
    (8, 9, 1.0300, 0.7400),
    (9, 10, 1.0440, 0.7400),
    (10, 11, 0.1966, 0.0650),
    (11, 12, 0.3744, 0.1238),
    (12, 13, 1.4680, 1.1550),
    (13, 14, 0.5416, 0.7129),
    (14, 15, 0.5910, 0.5260),
    (15, 16, 0.7463, 0.5450),
    (16, 17, 1.2890, 1.7210),
    (17, 18, 0.7320, 0.5740),
    (2, 19, 0.1640, 0.1565),
    (19, 20, 1.5042, 1.3554),
    (20, 21, 0.4095, 0.4784),
    (21, 22, 0.7089, 0.9373),
    (3, 23, 0.4512, 0.3083),
    (23, 24, 0.8980, 0.7091),
    (24, 25, 0.8960, 0.7011),
    (6, 26, 0.2030, 0.1034),
    (26, 27, 0.2842, 0.1447),
    (27, 28, 1.0590, 0.9337),
    (28, 29, 0.8042, 0.7006),
    (29, 30, 0.5075, 0.2585),
    (30, 31, 0.9744, 0.9630),
    (31, 32, 0.3105, 0.3619),
    (32, 33, 0.3410, 0.5302),
]

# normally-open link lines
_LINKS = [
    (8, 21, 2.0, 2.0),
    (9, 15, 2.0, 2.0),
    (12, 22, 2.0, 2.0),
    (18, 33, 0.5, 0.5),
    (25, 29, 0.5, 0.5),
]

# bus -> total demand (kW, kvar)
_LOADS = {
    2: (100, 60), 3: (90, 40), 4: (120, 80), 5: (60, 30), 6: (60, 20),
    7: (200, 100), 8: (200, 100), 9: (60, 20), 10: (60, 20), 11: (45, 30),
    12: (60, 35), 13: (60, 35), 14: (120, 80), 15: (60, 10), 16: (60, 20),
    17: (60, 20), 18: (90, 40), 19: (90, 40), 20: (90, 40), 21: (90, 40),
    22: (90, 40), 23: (90, 50), 24: (420, 200), 25: (420, 200), 26: (60, 25),
    27: (60, 25), 28: (60, 20), 29: (120, 70), 30: (200, 600), 31: (150, 70),
    32: (210, 100), 33: (60, 40),
}

# per-phase weights cycled by bus id; sums to 1 so bus totals stay canonical
_SPLITS = [
    (0.40, 0.35, 0.25),
    (0.25, 0.40, 0.35),
    (0.35, 0.25, 0.40),
]

# mutual impedance as a fraction of the self terms
_MUT_R = 0.08
_MUT_X = 0.18

# 24-point normalized shapes; PV peaks in period 13, load in period 20
PV_SHAPE = [
    0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
    0.0296, 0.0871, 0.2096, 0.4152, 0.6767, 0.9069,
    1.0, 0.9069, 0.6767, 0.4152, 0.2096, 0.0871,
    0.0296, 0.0, 0.0, 0.0, 0.0, 0.0,
]
LOAD_SHAPE = [
    0.52, 0.48, 0.46, 0.45, 0.47, 0.52,
    0.60, 0.70, 0.78, 0.82, 0.84, 0.80,
    0.76, 0.74, 0.75, 0.78, 0.84, 0.90,
    0.96, 1.00, 0.94, 0.82, 0.68, 0.58,
]

V_MIN, V_MAX = 0.95, 1.05
S_MAX_MVA = 3.5
Y_MAX_MW = 10.0

PV_SITES = [(10, "ABC"), (17, "A"), (22, "AB"), (32, "A")]
THETA_MIN = -math.acos(0.78)
THETA_MAX = math.acos(0.96)


def _z_cell(r, x):
    return [r, x]


def _z_matrix(r, x):
    zm_r, zm_x = _MUT_R * r, _MUT_X * x
    out = []
    for i in range(3):
        row = []
        for j in range(3):
            row.append(_z_cell(r, x) if i == j else _z_cell(zm_r, zm_x))
        out.append(row)
    return out


def ieee33_raw(dev_dg=0.2, dev_load=0.15, budget=None):
    """Instance-file dict; budget is a per-period int or None for unbudgeted."""
    buses = []
    for bid in range(1, 34):
        spec = {"id": bid, "phases": "ABC", "v_min_pu": V_MIN, "v_max_pu": V_MAX}
        if bid == 1:
            spec["is_root"] = True
        else:
            kw, kvar = _LOADS[bid]
            wa, wb, wc = _SPLITS[bid % 3]
            spec["load_mw"] = {
                "A": round(kw * wa / 1000.0, 6),
                "B": round(kw * wb / 1000.0, 6),
                "C": round(kw * wc / 1000.0, 6),
            }
            spec["load_mvar"] = {
                "A": round(kvar * wa / 1000.0, 6),
                "B": round(kvar * wb / 1000.0, 6),
                "C": round(kvar * wc / 1000.0, 6),
            }
        buses.append(spec)

    branches = []
    for f, t, r, x in _TREE:
        spec = {
            "id": f"{f}-{t}", "from": f, "to": t, "phases": "ABC",
            "z_ohm": _z_matrix(r, x), "s_max_mva": S_MAX_MVA,
            "switchable": True, "normally_open": False,
        }
        if (f, t) == (1, 2):
            spec["transformer"] = {"tau_min": 0.95, "delta_tau": 0.02, "taps": 5}
        branches.append(spec)
    for f, t, r, x in _LINKS:
        branches.append({
            "id": f"{f}-{t}", "from": f, "to": t, "phases": "ABC",
            "z_ohm": _z_matrix(r, x), "s_max_mva": S_MAX_MVA,
            "switchable": True, "normally_open": True,
        })

    dg_sites = [
        {"bus": bus, "phases": phases,
         "theta_min": THETA_MIN, "theta_max": THETA_MAX, "y_max_mw": Y_MAX_MW}
        for bus, phases in PV_SITES
    ]
    var_devices = [
        {"bus": 3, "kind": "continuous", "phases": "ABC",
         "q_min_mvar": -0.1, "q_max_mvar": 0.15},
        {"bus": 30, "kind": "continuous", "phases": "ABC",
         "q_min_mvar": -0.1, "q_max_mvar": 0.15},
        {"bus": 14, "kind": "discrete", "phases": "ABC",
         "delta_q_mvar": 0.06, "chi_max": 3},
        {"bus": 26, "kind": "discrete", "phases": "ABC",
         "delta_q_mvar": 0.06, "chi_max": 3},
    ]
    return {
        "name": "ieee33-3ph",
        "bases": {"s_mva": 1.0, "v_kv": 12.66},
        "buses": buses,
        "branches": branches,
        "dg_sites": dg_sites,
        "var_devices": var_devices,
        "curves": {"load": LOAD_SHAPE, "pv": PV_SHAPE},
        "uncertainty": {"dev_dg": dev_dg, "dev_load": dev_load,
                        "budget": [budget] * 24},
    }


def ieee33(**kwargs):
    return parse_instance(ieee33_raw(**kwargs), origin="ieee33-builtin")


def write_instance(path, **kwargs):
    with open(path, "w") as fh:
        json.dump(ieee33_raw(**kwargs), fh, indent=1, sort_keys=True)
        fh.write("\n")
