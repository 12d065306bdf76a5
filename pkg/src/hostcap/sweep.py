"""Exact unbalanced power flow on radial topologies.

Backward/forward sweep with full 3x3 impedance blocks: the backward pass
accumulates phase currents from the leaves, the forward pass updates voltage
phasors from the roots.  A branch with a tap changer is modelled as its series
impedance followed by an ideal ratio-tau transformer on the to-bus side, so
across the ideal part v_m = tau * v_to and the delivered current is
tau * I_series.

This solver is the accuracy reference for everything else in the package:
linear models are benchmarked against it and optimization results are replayed
through it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .netmodel import PHASE_INDEX, base_topology, spanning_tree_parents


class SweepError(RuntimeError):
    pass


@dataclass(frozen=True)
class InjectionSet:
    """Inputs of one power-flow case.

    s_inj maps bus -> {phase: net complex injection} in pu (generation minus
    demand plus var support).  taps maps branch id -> integer tap position for
    transformer branches (neutral when omitted); closed is the set of closed
    branch ids (base topology when None).
    """

    s_inj: dict
    taps: dict = field(default_factory=dict)
    closed: frozenset | None = None

    def injection(self, bus, phase):
        return self.s_inj.get(bus, {}).get(phase, 0j)


@dataclass(frozen=True)
class PowerFlowState:
    v: dict            # bus -> {phase: complex phasor}
    s_send: dict       # branch -> {phase: complex power entering at from_bus}
    loss: dict         # branch -> {phase: complex series loss}
    iterations: int
    max_mismatch: float
    closed: frozenset
    taps: dict

    def u(self, bus, phase):
        return abs(self.v[bus][phase]) ** 2

    def total_loss(self):
        return sum(sum(ph.values()) for ph in self.loss.values())


def resolve_taps(network, closed, taps=None):
    """Tap positions for every closed transformer branch, neutral by default."""
    out = dict(taps or {})
    for bid in closed:
        br = network.branches[bid]
        if br.transformer is not None and bid not in out:
            out[bid] = br.transformer.neutral_tap
    return out


def _ratio(branch, taps):
    if branch.transformer is None:
        return 1.0
    return branch.transformer.ratio(taps[branch.id])


def solve(network, injections, tol=1e-10, max_iter=300):
    """Run the sweep; raises SweepError on divergence or a non-radial closed set."""
    closed = injections.closed
    if closed is None:
        closed = base_topology(network)
    closed = frozenset(closed)
    parent, order = spanning_tree_parents(network, closed)
    taps = resolve_taps(network, closed, injections.taps)

    buses = network.buses
    mask = {i: np.array([ph in buses[i].phases for ph in "ABC"]) for i in buses}
    demand_conj = {}
    for i in buses:
        vec = np.zeros(3, dtype=complex)
        for ph in buses[i].phases:
            vec[PHASE_INDEX[ph]] = np.conj(-injections.injection(i, ph))
        demand_conj[i] = vec

    children = {i: [] for i in buses}
    for bus, (par, bid) in parent.items():
        if par is not None:
            children[par].append((bus, network.branches[bid]))

    v = {}
    for i in buses:
        vec = np.zeros(3, dtype=complex)
        for ph in buses[i].phases:
            vec[PHASE_INDEX[ph]] = network.root_voltage(ph)
        v[i] = vec

    i_series = {bid: np.zeros(3, dtype=complex) for bid in closed}
    delta = math.inf
    for it in range(1, max_iter + 1):
        # backward: delivered current required at each bus, leaves first
        i_del = {}
        for bus in reversed(order):
            with np.errstate(divide="ignore", invalid="ignore"):
                drawn = np.where(mask[bus], demand_conj[bus] / np.conj(v[bus]), 0)
            vec = np.where(np.isfinite(drawn), drawn, 0)
            for child, br in children[bus]:
                tau = _ratio(br, taps)
                if br.to_bus == child:
                    # reference-aligned: series current = delivered / tau
                    vec += i_del[child] / tau
                else:
                    # tree runs against the reference orientation
                    vec += i_del[child] * tau
            i_del[bus] = vec
        for bus in order:
            par, bid = parent[bus]
            if par is None:
                continue
            br = network.branches[bid]
            tau = _ratio(br, taps)
            if br.to_bus == bus:
                i_series[bid] = i_del[bus] / tau
            else:
                i_series[bid] = -i_del[bus]

        # forward: voltages from the roots
        delta = 0.0
        for bus in order:
            par, bid = parent[bus]
            if par is None:
                continue
            br = network.branches[bid]
            tau = _ratio(br, taps)
            if br.to_bus == bus:
                vm = v[par] - br.z @ i_series[bid]
                vnew = vm / tau
            else:
                vm = v[par] * tau
                vnew = vm + br.z @ i_series[bid]
            d = np.where(mask[bus], np.abs(vnew - v[bus]), 0.0)
            delta = max(delta, float(d.max()))
            v[bus] = np.where(mask[bus], vnew, 0)
        if delta < tol:
            break
    else:
        raise SweepError(f"sweep did not converge in {max_iter} iterations "
                         f"(last voltage change {delta:.3e})")

    vmap, s_send, loss = {}, {}, {}
    for i in buses:
        vmap[i] = {ph: complex(v[i][PHASE_INDEX[ph]]) for ph in buses[i].phases}
    for bid in sorted(closed):
        br = network.branches[bid]
        iref = i_series[bid]
        send = v[br.from_bus] * np.conj(iref)
        lss = (br.z @ iref) * np.conj(iref)
        s_send[bid] = {ph: complex(send[PHASE_INDEX[ph]]) for ph in br.phases}
        loss[bid] = {ph: complex(lss[PHASE_INDEX[ph]]) for ph in br.phases}

    return PowerFlowState(v=vmap, s_send=s_send, loss=loss, iterations=it,
                          max_mismatch=delta, closed=closed, taps=taps)


def _phasor_vec(state, network, bus):
    vec = np.zeros(3, dtype=complex)
    for ph in network.buses[bus].phases:
        vec[PHASE_INDEX[ph]] = state.v[bus][ph]
    return vec


def branch_currents(network, state):
    """Series currents recomputed from the stored phasors alone."""
    out = {}
    for bid in state.closed:
        br = network.branches[bid]
        tau = _ratio(br, state.taps)
        vf = _phasor_vec(state, network, br.from_bus)
        vt = _phasor_vec(state, network, br.to_bus)
        idx = [PHASE_INDEX[p] for p in br.phases]
        zsub = br.z[np.ix_(idx, idx)]
        rhs = (vf - tau * vt)[idx]
        cur = np.zeros(3, dtype=complex)
        cur[idx] = np.linalg.solve(zsub, rhs)
        out[bid] = cur
    return out


def equation_residuals(network, state, injections):
    """Residuals of the branch-flow equations at a solved state.

    Recomputes series currents from phasors and checks (a) complex power
    balance at every non-root bus, including the quadratic series-loss term,
    and (b) the squared-voltage relation across every closed branch including
    the tap ratio.  Returns (max |balance residual|, max |voltage residual|).
    """
    cur = branch_currents(network, state)
    res_s, res_u = 0.0, 0.0
    inflow = {i: np.zeros(3, dtype=complex) for i in network.buses}
    for bid in state.closed:
        br = network.branches[bid]
        tau = _ratio(br, state.taps)
        iref = cur[bid]
        vf = _phasor_vec(state, network, br.from_bus)
        vt = _phasor_vec(state, network, br.to_bus)
        inflow[br.from_bus] -= vf * np.conj(iref)
        inflow[br.to_bus] += vt * np.conj(tau * iref)
        vm = vf - br.z @ iref
        idx = [PHASE_INDEX[p] for p in br.phases]
        du = np.abs(vm[idx]) ** 2 - tau ** 2 * np.abs(vt[idx]) ** 2
        if len(du):
            res_u = max(res_u, float(np.max(np.abs(du))))
    for i, bus in network.buses.items():
        if bus.is_root:
            continue
        for ph in bus.phases:
            k = PHASE_INDEX[ph]
            res = inflow[i][k] + injections.injection(i, ph)
            res_s = max(res_s, abs(res))
    return res_s, res_u


@dataclass(frozen=True)
class Violation:
    kind: str          # overvoltage | undervoltage | thermal
    bus: int | None
    branch: str | None
    phase: str
    value: float
    limit: float
    excess: float


# model error allowance when judging limits on replayed optimization results,
# in squared-voltage units
DEFAULT_VIOLATION_TOL = 1e-4


def violation_report(network, state, tol=DEFAULT_VIOLATION_TOL):
    """Limit violations in a solved state, worst first."""
    out = []
    for i, bus in network.buses.items():
        for ph in bus.phases:
            u = state.u(i, ph)
            if u > bus.u_max[ph] + tol:
                out.append(Violation("overvoltage", i, None, ph,
                                     u, bus.u_max[ph], u - bus.u_max[ph]))
            elif u < bus.u_min[ph] - tol:
                out.append(Violation("undervoltage", i, None, ph,
                                     u, bus.u_min[ph], bus.u_min[ph] - u))
    for bid, per_phase in state.s_send.items():
        br = network.branches[bid]
        for ph, s in per_phase.items():
            cap = br.s_max.get(ph, math.inf)
            if abs(s) > cap + tol:
                out.append(Violation("thermal", None, bid, ph,
                                     abs(s), cap, abs(s) - cap))
    out.sort(key=lambda violation: -violation.excess)
    return out
