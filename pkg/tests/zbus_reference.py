"""Independent power-flow reference: nodal admittance matrix + Gauss Z-bus.

Deliberately a different method from the package's ladder sweep: the full
multi-phase admittance matrix is assembled (ideal-transformer stamps for tap
branches), factorized once, and node voltages are found by fixed-point
iteration on injection currents.  Shares nothing with the sweep beyond the
network data model.
"""

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from hostcap.netmodel import base_topology


def _index(network):
    """Unknown ordering: one slot per non-root (bus, phase)."""
    unknowns, fixed = {}, {}
    for i in sorted(network.buses):
        bus = network.buses[i]
        for ph in bus.phases:
            slot = fixed if bus.is_root else unknowns
            slot[(i, ph)] = len(slot)
    return unknowns, fixed


def solve(network, injections, tol=1e-12, max_iter=500):
    """Voltage phasors {bus: {phase: complex}} for one injection case."""
    closed = injections.closed
    if closed is None:
        closed = base_topology(network)
    taps = dict(injections.taps or {})
    unknowns, fixed = _index(network)
    n, m = len(unknowns), len(fixed)
    y_uu = np.zeros((n, n), dtype=complex)
    y_uf = np.zeros((n, m), dtype=complex)

    def stamp(a, b, val):
        if a in unknowns:
            if b in unknowns:
                y_uu[unknowns[a], unknowns[b]] += val
            else:
                y_uf[unknowns[a], fixed[b]] += val

    for bid in closed:
        br = network.branches[bid]
        tau = 1.0
        if br.transformer is not None:
            tap = taps.get(bid, br.transformer.neutral_tap)
            tau = br.transformer.ratio(tap)
        y_sub = np.linalg.inv(br.z_sub())
        for r, ph_r in enumerate(br.phases):
            for c, ph_c in enumerate(br.phases):
                y = y_sub[r, c]
                f_r, f_c = (br.from_bus, ph_r), (br.from_bus, ph_c)
                t_r, t_c = (br.to_bus, ph_r), (br.to_bus, ph_c)
                stamp(f_r, f_c, y)
                stamp(f_r, t_c, -tau * y)
                stamp(t_r, f_c, -tau * y)
                stamp(t_r, t_c, tau * tau * y)

    v_fixed = np.zeros(m, dtype=complex)
    for (i, ph), k in fixed.items():
        v_fixed[k] = network.root_voltage(ph)
    s_inj = np.zeros(n, dtype=complex)
    for (i, ph), k in unknowns.items():
        s_inj[k] = injections.injection(i, ph)

    lu = lu_factor(y_uu)
    v = np.array([network.root_voltage(ph) for (_, ph) in unknowns],
                 dtype=complex)
    base = -y_uf @ v_fixed
    for _ in range(max_iter):
        i_inj = np.conj(s_inj / v)
        v_new = lu_solve(lu, i_inj + base)
        if np.max(np.abs(v_new - v)) < tol:
            v = v_new
            break
        v = v_new
    else:
        raise RuntimeError("Z-bus reference did not converge")

    out = {i: {} for i in network.buses}
    for (i, ph), k in unknowns.items():
        out[i][ph] = complex(v[k])
    for (i, ph), k in fixed.items():
        out[i][ph] = complex(v_fixed[k])
    return out
