"""Capacity-assessment MILP over the level-1 linear grid model.

The builder produces, per period, a list of *tagged rows*: each row stores its
coefficients split by variable group,

* ``y``  - DG capacity (shared across periods and scenarios),
* ``u``  - continuous grid state (voltages, flows, tap-chain auxiliaries),
* ``z``  - schedule decisions (switch states, tap bits, var setpoints),
* ``a``  - binary uncertainty indicators,
* ``ya`` - products of a capacity variable and an indicator,

so one generator serves three consumers: the deterministic model (indicators
zero), the multi-scenario robust master (indicators folded in as data per
enumerated realization), and the mechanically generated dual of the inner
maximization (tags read off unchanged).

Scheduling devices follow the usual discrete tricks: binary-expanded tap
positions with an exact product chain for tau^2 voltage coupling, binary
products for switch-dependent virtual flows, and an octagonal inner
approximation of the per-phase thermal circle.  Radiality is enforced by a
closed-branch count plus virtual unit-demand flows; flows are carried in both
directions of every branch so any spanning tree is representable regardless
of branch reference orientation (the single-direction variant is kept behind
an option for comparison).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import milp
from .netmodel import ModelError, base_topology, is_radial
from .sweep import resolve_taps

SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class AnmOptions:
    """Which active-management controls the optimizer may move."""

    enable_reconfig: bool = True
    enable_oltc: bool = True
    enable_var: bool = True
    enable_dg_q: bool = True
    fixed_topology: frozenset | None = None   # closed set when reconfig is off
    fixed_taps: dict | None = None            # tap positions when oltc is off
    radiality: str = "bidirectional"          # | "fixed-orientation"

    def resolve_topology(self, network):
        closed = self.fixed_topology
        if closed is None:
            closed = base_topology(network)
        return frozenset(closed)


# -- naming -----------------------------------------------------------------

def yname(bus, ph):
    return f"y[{bus},{ph}]"


def wname(bid, t):
    return f"w[{bid},t{t}]"


def uname(bus, ph, t):
    return f"u[{bus},{ph},t{t}]"


def fpname(bid, ph, t):
    return f"fp[{bid},{ph},t{t}]"


def fqname(bid, ph, t):
    return f"fq[{bid},{ph},t{t}]"


def umname(bid, ph, t):
    return f"um[{bid},{ph},t{t}]"


def muname(bid, ph, t):
    return f"mu[{bid},{ph},t{t}]"


def nuname(bid, ph, t, n):
    return f"nu[{bid},{ph},t{t}].b{n}"


def omname(bid, ph, t, n):
    return f"om[{bid},{ph},t{t}].b{n}"


def tapname(bid, t):
    return f"tap[{bid},t{t}]"


def qcname(bus, ph, t):
    return f"qc[{bus},{ph},t{t}]"


def scname(bus, ph, t):
    return f"sc[{bus},{ph},t{t}]"


def qdgname(bus, ph, t):
    return f"qdg[{bus},{ph},t{t}]"


def aname(kind, bus, t):
    # kinds: Lu/Ld (load up/down), Gu/Gd (generation up/down)
    return f"a{kind}[{bus},t{t}]"


@dataclass
class TaggedRow:
    name: str
    sense: str          # "<=" | "=="
    rhs: float
    y: dict = field(default_factory=dict)
    u: dict = field(default_factory=dict)
    z: dict = field(default_factory=dict)
    a: dict = field(default_factory=dict)
    ya: dict = field(default_factory=dict)   # (y name, a name) -> coef
    in_master: bool = True    # pure variable-bound rows are kept out of the
                              # master, where the same bounds live on the vars


@dataclass
class PeriodBlock:
    t: int
    rows: list
    z_rows: list          # plain (coeffs, sense, rhs, name) rows in z only
    u_vars: dict          # name -> (lb, ub)
    z_vars: dict          # name -> (lb, ub, kind)
    a_vars: dict          # name -> (kind, bus)
    budget: int | None
    w_state: dict         # branch id -> ("var", name) | ("const", 0 or 1)
    tap_exp: dict         # branch id -> BitExpansion-like tuple data
    sc_exp: dict          # (bus, ph) -> bit names/weights
    eta: dict             # (bus, ph) -> predicted efficiency
    load: dict            # (bus, ph) -> complex predicted demand


@dataclass
class BuildBlocks:
    network: object
    scenario: object
    opts: AnmOptions
    y_vars: dict          # name -> (lb, ub)
    y_rows: list          # tagged rows over y only (bounds, caps)
    periods: list         # PeriodBlock
    y_of_site: dict       # (bus, ph) -> y name


def _phase_pairs(network):
    for i in sorted(network.buses):
        for ph in network.buses[i].phases:
            yield i, ph


def _graph_presolve(network, eligible):
    """Bridges and a fundamental cycle basis of the closed-able multigraph.

    Bridges must be closed in every spanning configuration, so their switch
    variables can be fixed exactly; each fundamental cycle yields the valid
    inequality sum(w) <= |cycle| - 1.  Both only sharpen the relaxation - the
    integer feasible set is unchanged.
    """
    adj = {i: [] for i in network.buses}
    for bid in eligible:
        br = network.branches[bid]
        adj[br.from_bus].append((br.to_bus, bid))
        adj[br.to_bus].append((br.from_bus, bid))

    # iterative low-link bridge search, multigraph-aware (skip by edge id)
    index = {}
    low = {}
    bridges = set()
    counter = 0
    for start in sorted(adj):
        if start in index:
            continue
        stack = [(start, None, iter(adj[start]))]
        index[start] = low[start] = counter
        counter += 1
        while stack:
            node, in_edge, it = stack[-1]
            advanced = False
            for nxt, bid in it:
                if bid == in_edge:
                    continue
                if nxt not in index:
                    index[nxt] = low[nxt] = counter
                    counter += 1
                    stack.append((nxt, bid, iter(adj[nxt])))
                    advanced = True
                    break
                low[node] = min(low[node], index[nxt])
            if not advanced:
                stack.pop()
                if stack:
                    parent = stack[-1][0]
                    low[parent] = min(low[parent], low[node])
                    if low[node] > index[parent]:
                        bridges.add(in_edge)

    # BFS tree + fundamental cycle per non-tree edge
    parent = {}
    depth = {}
    tree_edge = {}
    order = []
    for start in sorted(adj):
        if start in depth:
            continue
        depth[start] = 0
        order.append(start)
        queue = [start]
        while queue:
            node = queue.pop(0)
            for nxt, bid in adj[node]:
                if nxt in depth:
                    continue
                depth[nxt] = depth[node] + 1
                parent[nxt] = (node, bid)
                tree_edge[nxt] = bid
                queue.append(nxt)
    in_tree = set(tree_edge.values())
    cycles = []
    for bid in sorted(eligible):
        if bid in in_tree:
            continue
        br = network.branches[bid]
        a, b = br.from_bus, br.to_bus
        if a == b:
            continue
        path = [bid]
        na, nb = a, b
        while depth[na] > depth[nb]:
            na, e = parent[na]
            path.append(e)
        while depth[nb] > depth[na]:
            nb, e = parent[nb]
            path.append(e)
        while na != nb:
            na, ea = parent[na]
            nb, eb = parent[nb]
            path.append(ea)
            path.append(eb)
        cycles.append(path)
    return bridges, cycles


def build_blocks(network, scenario, opts=None):
    """Tagged constraint blocks for every period of the scenario."""
    opts = opts or AnmOptions()
    if opts.radiality not in ("bidirectional", "fixed-orientation"):
        raise milp.ConfigError(f"unknown radiality mode {opts.radiality!r}")

    y_vars, y_rows, y_of_site = {}, [], {}
    for bus in sorted(network.dg_sites):
        site = network.dg_sites[bus]
        for ph in site.phases:
            yn = yname(bus, ph)
            cap = site.y_max.get(ph, math.inf)
            y_vars[yn] = (0.0, cap)
            y_of_site[(bus, ph)] = yn
            y_rows.append(TaggedRow(name=f"ylb[{bus},{ph}]", sense="<=", rhs=0.0,
                                    y={yn: -1.0}, in_master=False))
            if math.isfinite(cap):
                y_rows.append(TaggedRow(name=f"yub[{bus},{ph}]", sense="<=", rhs=cap,
                                        y={yn: 1.0}, in_master=False))

    fixed_closed = opts.resolve_topology(network)
    if not opts.enable_reconfig:
        check = is_radial(network, fixed_closed)
        if not check:
            raise ModelError(f"fixed topology is not radial: {check.message}")
    fixed_taps = resolve_taps(
        network, [b for b in network.branches
                  if network.branches[b].transformer is not None],
        opts.fixed_taps)

    if opts.enable_reconfig:
        eligible = {bid for bid, br in network.branches.items()
                    if br.switchable or bid in fixed_closed}
        bridges, cycles = _graph_presolve(network, eligible)
    else:
        bridges, cycles = set(), []

    periods = [
        _build_period(network, scenario, t, opts, fixed_closed, fixed_taps,
                      bridges, cycles)
        for t in scenario.periods
    ]
    return BuildBlocks(network=network, scenario=scenario, opts=opts,
                       y_vars=y_vars, y_rows=y_rows, periods=periods,
                       y_of_site=y_of_site)


def _build_period(network, scenario, t, opts, fixed_closed, fixed_taps,
                  bridges=frozenset(), cycles=()):
    rows, z_rows = [], []
    u_vars, z_vars, a_vars = {}, {}, {}

    # switch state per branch; bridges of the closed-able graph are in every
    # spanning configuration, so their switches are fixed closed
    w_state = {}
    for bid in sorted(network.branches):
        br = network.branches[bid]
        if opts.enable_reconfig and br.switchable and bid not in bridges:
            wn = wname(bid, t)
            z_vars[wn] = (0.0, 1.0, "B")
            w_state[bid] = ("var", wn)
        elif opts.enable_reconfig and (br.switchable or bid in fixed_closed):
            w_state[bid] = ("const", 1)
        else:
            w_state[bid] = ("const", 1 if bid in fixed_closed else 0)

    def w_is_off(bid):
        return w_state[bid] == ("const", 0)

    # grid-state variables for usable branches
    for bid in sorted(network.branches):
        br = network.branches[bid]
        if w_is_off(bid):
            continue
        for ph in br.phases:
            cap = br.s_max.get(ph, math.inf)
            u_vars[fpname(bid, ph, t)] = (-cap, cap)
            u_vars[fqname(bid, ph, t)] = (-cap, cap)

    for i, ph in _phase_pairs(network):
        bus = network.buses[i]
        if bus.is_root:
            u0 = abs(network.root_voltage(ph)) ** 2
            u_vars[uname(i, ph, t)] = (u0, u0)
            rows.append(TaggedRow(name=f"uref[{i},{ph},t{t}]", sense="==", rhs=u0,
                                  u={uname(i, ph, t): 1.0}, in_master=False))
        else:
            u_vars[uname(i, ph, t)] = (bus.u_min[ph], bus.u_max[ph])
            rows.append(TaggedRow(name=f"uub[{i},{ph},t{t}]", sense="<=",
                                  rhs=bus.u_max[ph],
                                  u={uname(i, ph, t): 1.0}, in_master=False))
            rows.append(TaggedRow(name=f"ulb[{i},{ph},t{t}]", sense="<=",
                                  rhs=-bus.u_min[ph],
                                  u={uname(i, ph, t): -1.0}, in_master=False))

    # tap-changer chains
    tap_exp = {}
    for bid in sorted(network.branches):
        br = network.branches[bid]
        if br.transformer is None or w_is_off(bid):
            continue
        xf = br.transformer
        jbus = br.to_bus
        u_max_j = max(network.buses[jbus].u_max[ph] for ph in br.phases)
        if network.buses[jbus].is_root:
            u_max_j = max(u_max_j, 1.0)
        m_nu = u_max_j
        m_om = xf.tau_max * u_max_j
        if opts.enable_oltc:
            n_bits = max(1, math.ceil(math.log2(xf.tap_count + 1)))
            bits = []
            for n in range(n_bits):
                bn = f"{tapname(bid, t)}.b{n}"
                z_vars[bn] = (0.0, 1.0, "B")
                bits.append((bn, 2 ** n))
            z_rows.append(({bn: wgt for bn, wgt in bits}, "<=", xf.tap_count,
                           f"{tapname(bid, t)}.cap"))
            tap_exp[bid] = tuple(bits)
            for ph in br.phases:
                un_j = uname(jbus, ph, t)
                mu_n = muname(bid, ph, t)
                um_n = umname(bid, ph, t)
                u_lo_j, u_hi_j = u_vars[un_j]
                u_vars[mu_n] = (xf.tau_min * u_lo_j, xf.tau_max * u_hi_j)
                u_vars[um_n] = (xf.tau_min ** 2 * u_lo_j,
                                xf.tau_max ** 2 * u_hi_j)
                mu_row = TaggedRow(name=f"{mu_n}.def", sense="==", rhs=0.0,
                                   u={mu_n: 1.0, un_j: -xf.tau_min})
                um_row = TaggedRow(name=f"{um_n}.def", sense="==", rhs=0.0,
                                   u={um_n: 1.0, mu_n: -xf.tau_min})
                for bn, wgt in bits:
                    nu_n = nuname(bid, ph, t, int(math.log2(wgt)))
                    om_n = omname(bid, ph, t, int(math.log2(wgt)))
                    u_vars[nu_n] = (0.0, m_nu)
                    u_vars[om_n] = (0.0, m_om)
                    mu_row.u[nu_n] = -xf.delta_tau * wgt
                    um_row.u[om_n] = -xf.delta_tau * wgt
                    rows.extend(_product_rows(nu_n, un_j, bn, m_nu))
                    rows.extend(_product_rows(om_n, mu_n, bn, m_om))
                rows.append(mu_row)
                rows.append(um_row)
        else:
            tau = xf.ratio(fixed_taps[bid])
            for ph in br.phases:
                um_n = umname(bid, ph, t)
                u_lo_j, u_hi_j = u_vars[uname(jbus, ph, t)]
                u_vars[um_n] = (tau ** 2 * u_lo_j, tau ** 2 * u_hi_j)
                rows.append(TaggedRow(
                    name=f"{um_n}.fix", sense="==", rhs=0.0,
                    u={um_n: 1.0, uname(jbus, ph, t): -tau ** 2}))

    # Voltage-drop rows with switch relaxation, level-1 self terms.  The
    # disjunction constant only needs to cover the voltage windows: an open
    # branch carries zero flow (thermal rows scale with w), so the flow terms
    # vanish exactly in the relaxed case.
    for bid in sorted(network.branches):
        br = network.branches[bid]
        if w_is_off(bid):
            continue
        wstate = w_state[bid]
        for ph in br.phases:
            z_self = br.z_self(ph)
            r2, x2 = 2.0 * z_self.real, 2.0 * z_self.imag
            up = uname(br.from_bus, ph, t)
            if br.transformer is not None:
                dn = umname(bid, ph, t)
                dn_lo, dn_hi = u_vars[dn][0], u_vars[dn][1]
            else:
                dn = uname(br.to_bus, ph, t)
                dn_lo, dn_hi = u_vars[dn]
            up_lo, up_hi = u_vars[up]
            if wstate[0] != "const" and not math.isfinite(br.s_max.get(ph, math.inf)):
                raise ModelError(
                    f"switchable branch {bid} needs a thermal rating on phase"
                    f" {ph}; without one an open switch cannot zero its flow")
            m0 = (up_hi - dn_lo) + 1e-9
            m0b = (dn_hi - up_lo) + 1e-9
            base_u = {up: 1.0, dn: -1.0,
                      fpname(bid, ph, t): -r2, fqname(bid, ph, t): -x2}
            if wstate[0] == "const":
                rows.append(TaggedRow(name=f"vd[{bid},{ph},t{t}]", sense="==",
                                      rhs=0.0, u=dict(base_u)))
            else:
                wn = wstate[1]
                rows.append(TaggedRow(name=f"vd+[{bid},{ph},t{t}]", sense="<=",
                                      rhs=m0, u=dict(base_u), z={wn: m0}))
                neg = {k: -v for k, v in base_u.items()}
                rows.append(TaggedRow(name=f"vd-[{bid},{ph},t{t}]", sense="<=",
                                      rhs=m0b, u=neg, z={wn: m0b}))

    # octagonal thermal rows
    for bid in sorted(network.branches):
        br = network.branches[bid]
        if w_is_off(bid):
            continue
        wstate = w_state[bid]
        for ph in br.phases:
            cap = br.s_max.get(ph, math.inf)
            if not math.isfinite(cap):
                continue
            pn, qn = fpname(bid, ph, t), fqname(bid, ph, t)
            combos = [({pn: 1.0}, cap), ({pn: -1.0}, cap),
                      ({qn: 1.0}, cap), ({qn: -1.0}, cap),
                      ({pn: 1.0, qn: 1.0}, SQRT2 * cap),
                      ({pn: 1.0, qn: -1.0}, SQRT2 * cap),
                      ({pn: -1.0, qn: 1.0}, SQRT2 * cap),
                      ({pn: -1.0, qn: -1.0}, SQRT2 * cap)]
            for k, (expr, lim) in enumerate(combos):
                if wstate[0] == "const":
                    rows.append(TaggedRow(name=f"oct{k}[{bid},{ph},t{t}]",
                                          sense="<=", rhs=lim, u=dict(expr)))
                else:
                    rows.append(TaggedRow(name=f"oct{k}[{bid},{ph},t{t}]",
                                          sense="<=", rhs=0.0, u=dict(expr),
                                          z={wstate[1]: -lim}))

    # var devices
    sc_exp = {}
    for dev in network.var_devices:
        for ph in dev.phases:
            if dev.kind == "continuous":
                qn = qcname(dev.bus, ph, t)
                lo, hi = (dev.q_min, dev.q_max) if opts.enable_var else (0.0, 0.0)
                z_vars[qn] = (lo, hi, "C")
            else:
                if not opts.enable_var or dev.chi_max < 1:
                    continue
                n_bits = max(1, math.ceil(math.log2(dev.chi_max + 1)))
                bits = []
                for n in range(n_bits):
                    bn = f"{scname(dev.bus, ph, t)}.b{n}"
                    z_vars[bn] = (0.0, 1.0, "B")
                    bits.append((bn, 2 ** n))
                z_rows.append(({bn: wgt for bn, wgt in bits}, "<=", dev.chi_max,
                               f"{scname(dev.bus, ph, t)}.cap"))
                sc_exp[(dev.bus, ph)] = tuple(bits)

    # uncertainty indicators
    dev_dg, dev_load = scenario.dev_dg, scenario.dev_load
    eta, load = {}, {}
    for bus in sorted(network.dg_sites):
        site = network.dg_sites[bus]
        for ph in site.phases:
            eta[(bus, ph)] = scenario.eta(bus, ph, t)
        if dev_dg > 0 and any(eta[(bus, ph)] > 0 for ph in site.phases):
            a_vars[aname("Gu", bus, t)] = ("Gu", bus)
            a_vars[aname("Gd", bus, t)] = ("Gd", bus)
    for i in sorted(network.buses):
        bus = network.buses[i]
        has_p = False
        for ph in bus.phases:
            dem = bus.load.get(ph, 0j) * scenario.load_shape[t - 1]
            load[(i, ph)] = dem
            if dem.real != 0:
                has_p = True
        if dev_load > 0 and has_p:
            a_vars[aname("Lu", i, t)] = ("Lu", i)
            a_vars[aname("Ld", i, t)] = ("Ld", i)

    # DG reactive cones
    for bus in sorted(network.dg_sites):
        site = network.dg_sites[bus]
        tmin, tmax = math.tan(site.theta_min), math.tan(site.theta_max)
        agu, agd = aname("Gu", bus, t), aname("Gd", bus, t)
        has_a = agu in a_vars
        for ph in site.phases:
            qn = qdgname(bus, ph, t)
            if opts.enable_dg_q:
                z_vars[qn] = (-math.inf, math.inf, "C")
            else:
                z_vars[qn] = (0.0, 0.0, "C")
            yn = yname(bus, ph)
            e = eta[(bus, ph)]
            hi = TaggedRow(name=f"cone+[{bus},{ph},t{t}]", sense="<=", rhs=0.0,
                           z={qn: 1.0}, y={yn: -tmax * e})
            lo = TaggedRow(name=f"cone-[{bus},{ph},t{t}]", sense="<=", rhs=0.0,
                           z={qn: -1.0}, y={yn: tmin * e})
            if has_a and e > 0:
                hi.ya[(yn, agu)] = -tmax * dev_dg * e
                hi.ya[(yn, agd)] = tmax * dev_dg * e
                lo.ya[(yn, agu)] = tmin * dev_dg * e
                lo.ya[(yn, agd)] = -tmin * dev_dg * e
            rows.append(hi)
            rows.append(lo)

    # nodal balance
    for i in sorted(network.buses):
        bus = network.buses[i]
        if bus.is_root:
            continue
        for ph in bus.phases:
            prow = TaggedRow(name=f"kclP[{i},{ph},t{t}]", sense="==", rhs=0.0)
            qrow = TaggedRow(name=f"kclQ[{i},{ph},t{t}]", sense="==", rhs=0.0)
            for bid in sorted(network.branches):
                br = network.branches[bid]
                if w_is_off(bid) or ph not in br.phases:
                    continue
                sgn = 0.0
                if br.from_bus == i:
                    sgn = 1.0
                elif br.to_bus == i:
                    sgn = -1.0
                if sgn:
                    prow.u[fpname(bid, ph, t)] = sgn
                    qrow.u[fqname(bid, ph, t)] = sgn
            site = network.dg_sites.get(i)
            if site is not None and ph in site.phases:
                yn = yname(i, ph)
                e = eta[(i, ph)]
                prow.y[yn] = -e
                agu, agd = aname("Gu", i, t), aname("Gd", i, t)
                if agu in a_vars and e > 0:
                    prow.ya[(yn, agu)] = -dev_dg * e
                    prow.ya[(yn, agd)] = dev_dg * e
                qn = qdgname(i, ph, t)
                qrow.z[qn] = -1.0
            for dev in network.var_devices:
                if dev.bus != i or ph not in dev.phases:
                    continue
                if dev.kind == "continuous":
                    qrow.z[qcname(i, ph, t)] = -1.0
                elif (i, ph) in sc_exp:
                    for bn, wgt in sc_exp[(i, ph)]:
                        qrow.z[bn] = -dev.delta_q * wgt
            dem = load[(i, ph)]
            prow.rhs = -dem.real
            qrow.rhs = -dem.imag
            alu, ald = aname("Lu", i, t), aname("Ld", i, t)
            if alu in a_vars and dem.real != 0:
                kappa = dem.imag / dem.real
                dp = dev_load * dem.real
                prow.a[alu] = dp
                prow.a[ald] = -dp
                qrow.a[alu] = kappa * dp
                qrow.a[ald] = -kappa * dp
            rows.append(prow)
            rows.append(qrow)

    # radiality: closed count plus virtual unit-demand flows
    n_need = len(network.buses) - len(network.roots)
    any_w_var = any(st[0] == "var" for st in w_state.values())
    if any_w_var:
        count = {}
        const_closed = 0
        for bid, st in w_state.items():
            if st[0] == "var":
                count[st[1]] = 1.0
            else:
                const_closed += st[1]
        z_rows.append((count, "==", n_need - const_closed, f"wcount[t{t}]"))
    else:
        if len(fixed_closed) != n_need:
            raise ModelError("fixed topology does not have the spanning count")

    # The switch-flow product w * rho is kept in projected form: directed
    # flow variables capped by the switch state, which has the same integer
    # feasible set and a tighter LP relaxation than carrying the product
    # variable separately.  In bidirectional mode a continuous orientation
    # layer is added on top: each closed branch is oriented away from the
    # roots and every non-root node claims exactly one feeding arc.  On an
    # integral spanning forest that orientation is unique, so the orientation
    # variables never need integrality, yet the claim equalities cut off most
    # fractional switch states (a fractional loop detached from the roots
    # cannot raise enough feeding mass for its own nodes).
    flow_m0 = float(len(network.buses) - 1)
    bidi = opts.radiality == "bidirectional"
    inflow = {i: {} for i in network.buses}
    feed_in = {i: {} for i in network.buses}
    for bid in sorted(network.branches):
        br = network.branches[bid]
        st = w_state[bid]
        if st == ("const", 0):
            continue
        arcs = [("f", br.from_bus, br.to_bus)]
        if bidi:
            arcs.append(("r", br.to_bus, br.from_bus))
            arcs = [a for a in arcs if not network.buses[a[2]].is_root]
        orient = {}
        cap_row = {}
        for tag, src, dst in arcs:
            rn = f"r{tag}[{bid},t{t}]"
            z_vars[rn] = (0.0, flow_m0, "C")
            cap_row[rn] = 1.0
            inflow[dst][rn] = inflow[dst].get(rn, 0.0) + 1.0
            inflow[src][rn] = inflow[src].get(rn, 0.0) - 1.0
            if bidi:
                bn = f"b{tag}[{bid},t{t}]"
                z_vars[bn] = (0.0, 1.0, "C")
                orient[bn] = 1.0
                feed_in[dst][bn] = 1.0
                z_rows.append(({rn: 1.0, bn: -flow_m0}, "<=", 0.0,
                               f"rcap{tag}[{bid},t{t}]"))
        if bidi:
            if st[0] == "var":
                orient[st[1]] = -1.0
                z_rows.append((orient, "==", 0.0, f"orient[{bid},t{t}]"))
            else:
                z_rows.append((orient, "==", float(st[1]),
                               f"orient[{bid},t{t}]"))
        elif st[0] == "var":
            cap_row[st[1]] = -flow_m0
            z_rows.append((cap_row, "<=", 0.0, f"rcap[{bid},t{t}]"))
    for i in sorted(network.buses):
        if network.buses[i].is_root:
            continue
        z_rows.append((inflow[i], "==", 1.0, f"vflow[{i},t{t}]"))
        if bidi:
            z_rows.append((feed_in[i], "==", 1.0, f"feed[{i},t{t}]"))

    # one open branch per independent cycle (valid for every spanning tree)
    for k, cycle in enumerate(cycles):
        coeffs, limit = {}, len(cycle) - 1
        for bid in cycle:
            st = w_state[bid]
            if st[0] == "var":
                coeffs[st[1]] = coeffs.get(st[1], 0.0) + 1.0
            else:
                limit -= st[1]
        if coeffs:
            z_rows.append((coeffs, "<=", float(limit), f"cyc{k}[t{t}]"))

    # every non-root node keeps at least one incident closed branch (implied
    # by the orientation layer; stated explicitly when that layer is absent)
    if any_w_var and not bidi:
        for i in sorted(network.buses):
            if network.buses[i].is_root:
                continue
            coeffs, need = {}, 1.0
            for bid in sorted(network.branches):
                br = network.branches[bid]
                if i not in (br.from_bus, br.to_bus):
                    continue
                st = w_state[bid]
                if st[0] == "var":
                    coeffs[st[1]] = coeffs.get(st[1], 0.0) + 1.0
                else:
                    need -= st[1]
            if coeffs and need > 0:
                z_rows.append((coeffs, ">=", need, f"deg[{i},t{t}]"))

    return PeriodBlock(t=t, rows=rows, z_rows=z_rows, u_vars=u_vars,
                       z_vars=z_vars, a_vars=a_vars,
                       budget=scenario.budget_of(t), w_state=w_state,
                       tap_exp=tap_exp, sc_exp=sc_exp, eta=eta, load=load)


def _product_rows(prod, cont, binary, m0):
    """Tagged big-M rows for prod = binary * cont with cont in [0, m0];
    the binary lives in the z group."""
    return [
        TaggedRow(name=f"{prod}/cap", sense="<=", rhs=0.0,
                  u={prod: 1.0}, z={binary: -m0}),
        TaggedRow(name=f"{prod}/le", sense="<=", rhs=0.0,
                  u={prod: 1.0, cont: -1.0}),
        TaggedRow(name=f"{prod}/ge", sense="<=", rhs=m0,
                  u={cont: 1.0, prod: -1.0}, z={binary: m0}),
        TaggedRow(name=f"{prod}/pos", sense="<=", rhs=0.0,
                  u={prod: -1.0}, in_master=False),
    ]


# -- realizations -----------------------------------------------------------

@dataclass(frozen=True)
class UncertaintyRealization:
    """0/1 indicator values keyed by indicator variable name; absent = 0."""

    values: dict = field(default_factory=dict)
    label: str = "nominal"

    def __getitem__(self, name):
        return self.values.get(name, 0.0)

    def active(self):
        return tuple(sorted(n for n, v in self.values.items() if v > 0.5))

    def key(self):
        return self.active()

    @classmethod
    def nominal(cls):
        return cls(values={}, label="nominal")

    def eta_factor(self, scenario, bus, t):
        up = self[aname("Gu", bus, t)]
        dn = self[aname("Gd", bus, t)]
        return 1.0 + scenario.dev_dg * (up - dn)

    def load_factor(self, scenario, bus, t):
        up = self[aname("Lu", bus, t)]
        dn = self[aname("Ld", bus, t)]
        return 1.0 + scenario.dev_load * (up - dn)

    def check_budget(self, blocks):
        """True if indicators are admissible for every period block."""
        for blk in blocks.periods:
            used = sum(self[n] for n in blk.a_vars)
            if blk.budget is not None and used > blk.budget + 1e-9:
                return False
            for n, (kind, bus) in blk.a_vars.items():
                if kind in ("Gu", "Lu"):
                    twin = aname("Gd" if kind == "Gu" else "Ld", bus, blk.t)
                    if self[n] + self[twin] > 1 + 1e-9:
                        return False
        return True


# -- model assembly ---------------------------------------------------------

@dataclass
class MasterIndex:
    blocks: BuildBlocks
    realizations: list
    u_rename: list        # per scenario: dict template name -> model name
    periods: tuple        # period indices instantiated in the model


def _u_tag(name, k):
    return f"{name}@s{k}" if k else name


def build_master(blocks, realizations, name="master", periods=None,
                 fix_y=None):
    """Multi-scenario model: shared y and schedule, per-realization grid state.

    `periods` restricts the model to a subset of period blocks (default all);
    `fix_y` pins the capacity variables, turning the model into a pure
    schedule-feasibility search for the listed periods.
    """
    if periods is None:
        included = [blk for blk in blocks.periods]
    else:
        wanted = set(periods)
        included = [blk for blk in blocks.periods if blk.t in wanted]
        missing = wanted - {blk.t for blk in included}
        if missing:
            raise milp.ConfigError(f"unknown periods {sorted(missing)}")
    model = milp.MilpModel(name=name, sense="max")
    for yn, (lo, hi) in blocks.y_vars.items():
        if fix_y is not None:
            lo = hi = fix_y[yn]
        model.add_var(yn, lb=lo, ub=hi)
        model.add_objective_term(yn, 1.0)
    for blk in included:
        for zn, (lo, hi, kind) in blk.z_vars.items():
            model.add_var(zn, lb=lo, ub=hi, kind=kind)
        for coeffs, sense, rhs, rname in blk.z_rows:
            model.add_constr(coeffs, sense, rhs, name=rname)

    u_rename = []
    for k, real in enumerate(realizations):
        ren = {}
        for blk in included:
            for un, (lo, hi) in blk.u_vars.items():
                ren[un] = model.add_var(_u_tag(un, k), lb=lo, ub=hi)
        u_rename.append(ren)
        for blk in included:
            for row in blk.rows:
                if not row.in_master:
                    continue
                coeffs = {}
                rhs = row.rhs
                for yn, c in row.y.items():
                    coeffs[yn] = coeffs.get(yn, 0.0) + c
                for un, c in row.u.items():
                    coeffs[ren[un]] = coeffs.get(ren[un], 0.0) + c
                for zn, c in row.z.items():
                    coeffs[zn] = coeffs.get(zn, 0.0) + c
                for an, c in row.a.items():
                    rhs -= c * real[an]
                for (yn, an), c in row.ya.items():
                    if real[an]:
                        coeffs[yn] = coeffs.get(yn, 0.0) + c * real[an]
                model.add_constr(coeffs, row.sense, rhs,
                                 name=f"{row.name}@s{k}")
    return model, MasterIndex(blocks=blocks, realizations=list(realizations),
                              u_rename=u_rename,
                              periods=tuple(blk.t for blk in included))


def build_dccam(network, scenario, opts=None):
    """Deterministic assessment model: the master at the nominal realization."""
    blocks = build_blocks(network, scenario, opts)
    model, index = build_master(blocks, [UncertaintyRealization.nominal()],
                                name="dccam")
    return model, index


# -- extraction -------------------------------------------------------------

@dataclass(frozen=True)
class AssessmentResult:
    objective: float              # total capacity, pu
    y: dict                       # (bus, ph) -> pu
    topology: dict                # t -> frozenset of closed branch ids
    taps: dict                    # t -> {branch id: tap}
    q_svc: dict                   # t -> {(bus, ph): pu}
    sc_steps: dict                # t -> {(bus, ph): int}
    q_dg: dict                    # t -> {(bus, ph): pu}
    status: str
    gap: float | None = None
    bound: float | None = None
    check_violation: float = 0.0

    def z_values(self, blocks):
        """Schedule values keyed by z variable name, for subproblem folding."""
        out = {}
        for blk in blocks.periods:
            t = blk.t
            for bid, st in blk.w_state.items():
                if st[0] == "var":
                    out[st[1]] = 1.0 if bid in self.topology[t] else 0.0
            for bid, bits in blk.tap_exp.items():
                tap = self.taps[t].get(bid, 0)
                for bn, wgt in bits:
                    out[bn] = float((tap // wgt) % 2)
            for (bus, ph), bits in blk.sc_exp.items():
                step = self.sc_steps[t].get((bus, ph), 0)
                for bn, wgt in bits:
                    out[bn] = float((step // wgt) % 2)
            for zn in blk.z_vars:
                if zn.startswith("qc["):
                    key = _parse_key(zn)
                    out[zn] = self.q_svc[t].get(key, 0.0)
                elif zn.startswith("qdg["):
                    key = _parse_key(zn)
                    out[zn] = self.q_dg[t].get(key, 0.0)
        return out


def _parse_key(zn):
    inner = zn[zn.index("[") + 1:zn.index("]")]
    bus, ph, _ = inner.split(",")
    return int(bus), ph


def extract(result, index, check_tol=1e-6):
    """Decisions and capacity from a solved master; re-checks the model rows."""
    if result.values is None:
        raise milp.SolverError(f"no solution to extract: {result.status}")
    blocks = index.blocks
    network = blocks.network
    worst, where = result.model.check(result.values, tol=check_tol)
    if worst > check_tol:
        raise milp.SolverError(
            f"solution violates {where} by {worst:.2e} (tol {check_tol})")

    y = {key: result.value(yn) for key, yn in blocks.y_of_site.items()}
    topology, taps, q_svc, sc_steps, q_dg = {}, {}, {}, {}, {}
    for blk in blocks.periods:
        t = blk.t
        if t not in index.periods:
            continue
        closed = set()
        for bid, st in blk.w_state.items():
            if st[0] == "const":
                if st[1]:
                    closed.add(bid)
            elif result.value(st[1]) > 0.5:
                closed.add(bid)
        topology[t] = frozenset(closed)
        check = is_radial(network, topology[t])
        if not check:
            raise milp.SolverError(f"period {t}: extracted topology not radial: "
                                   f"{check.message}")
        taps[t] = {}
        for bid in sorted(network.branches):
            br = network.branches[bid]
            if br.transformer is None or bid not in closed:
                continue
            if bid in blk.tap_exp:
                taps[t][bid] = round(sum(wgt * result.value(bn)
                                         for bn, wgt in blk.tap_exp[bid]))
            else:
                taps[t][bid] = resolve_taps(network, [bid],
                                            blocks.opts.fixed_taps)[bid]
        q_svc[t], sc_steps[t], q_dg[t] = {}, {}, {}
        for zn in blk.z_vars:
            if zn.startswith("qc["):
                q_svc[t][_parse_key(zn)] = result.value(zn)
            elif zn.startswith("qdg["):
                q_dg[t][_parse_key(zn)] = result.value(zn)
        for (bus, ph), bits in blk.sc_exp.items():
            sc_steps[t][(bus, ph)] = round(sum(wgt * result.value(bn)
                                               for bn, wgt in bits))
    return AssessmentResult(
        objective=float(result.objective), y=y, topology=topology, taps=taps,
        q_svc=q_svc, sc_steps=sc_steps, q_dg=q_dg, status=result.status,
        gap=result.gap, bound=result.bound, check_violation=worst)


def _binding_order(blocks):
    """Periods sorted by how likely they bind the capacity: highest predicted
    generation potential first, lighter total load breaking ties."""

    def score(blk):
        return (-sum(blk.eta.values()),
                sum(v.real for v in blk.load.values()))

    return [blk.t for blk in sorted(blocks.periods, key=score)]


def solve_master(blocks, realizations, params=None, fill_params=None,
                 start_periods=None):
    """Solve the multi-scenario master, activating period blocks on demand.

    Periods are coupled only through the shared capacity, so a master over a
    subset of periods is a relaxation of the full one.  The loop solves the
    restricted master, then checks every omitted period with a small
    fixed-capacity scheduling model: if all of them admit a feasible
    schedule, the restricted optimum is attained by the assembled solution
    and the loop stops; otherwise the refusing periods join the master.

    Returns (merged AssessmentResult over all periods, index of the final
    restricted master, active period tuple).
    """
    order = _binding_order(blocks)
    active = set(start_periods or order[:1])
    fill_params = fill_params or milp.SolveParams(
        mip_gap=0.5,
        time_limit=params.time_limit if params else None,
        heuristic_effort=params.heuristic_effort if params else None)
    while True:
        model, index = build_master(blocks, realizations, periods=active)
        res = model.solve(params=params)
        if res.values is None:
            raise milp.SolverError(
                f"master over periods {sorted(active)}: no solution "
                f"({res.status}: {res.message})")
        part = extract(res, index)
        y_star = {yn: res.value(yn) for yn in blocks.y_vars}
        refused, fills = [], []
        for t in order:
            if t in active:
                continue
            fmodel, findex = build_master(blocks, realizations, periods=[t],
                                          fix_y=y_star, name=f"fill[t{t}]")
            fres = fmodel.solve(params=fill_params)
            if fres.status == milp.SolverStatus.INFEASIBLE or fres.values is None:
                refused.append(t)
                continue
            fills.append(extract(fres, findex))
        if refused:
            active.update(refused)
            continue
        merged = part
        for fill in fills:
            merged = replace(
                merged,
                topology={**merged.topology, **fill.topology},
                taps={**merged.taps, **fill.taps},
                q_svc={**merged.q_svc, **fill.q_svc},
                sc_steps={**merged.sc_steps, **fill.sc_steps},
                q_dg={**merged.q_dg, **fill.q_dg},
                check_violation=max(merged.check_violation,
                                    fill.check_violation))
        return merged, index, tuple(sorted(active))


def assess_deterministic(network, scenario, opts=None, params=None,
                         dump_lp=None):
    """Build and solve the deterministic model; returns an AssessmentResult."""
    blocks = build_blocks(network, scenario, opts)
    if dump_lp:
        model, _ = build_master(blocks, [UncertaintyRealization.nominal()],
                                name="dccam")
        milp.write_lp(model, dump_lp)
    result, _, _ = solve_master(blocks, [UncertaintyRealization.nominal()],
                                params=params)
    return result
