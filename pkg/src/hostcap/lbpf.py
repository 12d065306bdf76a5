"""Linearized branch-flow models for unbalanced feeders.

Two accuracy levels share one coefficient container:

* level 1: lossless, operating-point independent.  Per phase,
  u_from - u_m = 2 (r p + x q) with the self impedance only, and flows balance
  without losses.
* level 2: first-order expansion of the exact branch equations around an
  operating point (v0, p0, q0) taken from a solved sweep state.  Phase
  coupling and the quadratic loss terms enter through dense per-branch
  matrices; the expansion is exact at its center.

A branch row always reads

    u_from - tau^2 u_to = g_u p + b_u q - l_u

and the received power at the to-bus is g_p p + b_p q + l_p (resp. q).  All
matrices are restricted to the branch's phases.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .netmodel import PHASE_INDEX, ModelError, base_topology
from .sweep import resolve_taps


@dataclass(frozen=True)
class BranchLin:
    """Per-branch linear coefficients over the branch's phases."""

    phases: tuple
    g_u: np.ndarray
    b_u: np.ndarray
    l_u: np.ndarray
    g_p: np.ndarray
    b_p: np.ndarray
    l_p: np.ndarray
    g_q: np.ndarray
    b_q: np.ndarray
    l_q: np.ndarray

    def received_p(self, p, q):
        return self.g_p @ p + self.b_p @ q + self.l_p

    def received_q(self, p, q):
        return self.g_q @ p + self.b_q @ q + self.l_q

    def loss_p(self, p, q):
        return p - self.received_p(p, q)

    def loss_q(self, p, q):
        return q - self.received_q(p, q)


@dataclass(frozen=True)
class OperatingPoint:
    """Anchor of a level-2 expansion: per closed branch, the from-bus voltage
    phasors and sending-end flows of a solved exact state."""

    v0: dict          # branch -> complex array over branch phases
    p0: dict
    q0: dict
    closed: frozenset
    taps: dict

    @classmethod
    def from_state(cls, network, state):
        v0, p0, q0 = {}, {}, {}
        for bid in state.closed:
            br = network.branches[bid]
            v0[bid] = np.array([state.v[br.from_bus][ph] for ph in br.phases])
            s = np.array([state.s_send[bid][ph] for ph in br.phases])
            p0[bid] = s.real.copy()
            q0[bid] = s.imag.copy()
        return cls(v0=v0, p0=p0, q0=q0, closed=state.closed, taps=dict(state.taps))


@dataclass(frozen=True)
class LinCoeffs:
    model: str                   # "lbpf1" | "lbpf2"
    per_branch: dict             # branch id -> BranchLin
    closed: frozenset
    taps: dict = field(default_factory=dict)


def lbpf1_terms(branch):
    """Level-1 coefficients of one branch: diagonal drop terms, lossless balance."""
    k = len(branch.phases)
    idx = [PHASE_INDEX[p] for p in branch.phases]
    zsub = branch.z[np.ix_(idx, idx)]
    r = np.diag(np.diag(zsub).real)
    x = np.diag(np.diag(zsub).imag)
    eye = np.eye(k)
    zero = np.zeros((k, k))
    zvec = np.zeros(k)
    return BranchLin(phases=branch.phases,
                     g_u=2 * r, b_u=2 * x, l_u=zvec,
                     g_p=eye, b_p=zero, l_p=zvec,
                     g_q=zero, b_q=eye, l_q=zvec)


def lbpf1_coeffs(network, closed=None, taps=None):
    if closed is None:
        closed = base_topology(network)
    closed = frozenset(closed)
    taps = resolve_taps(network, closed, taps)
    per_branch = {bid: lbpf1_terms(network.branches[bid]) for bid in closed}
    return LinCoeffs(model="lbpf1", per_branch=per_branch, closed=closed, taps=taps)


def _branch_lbpf2(branch, v0, p0, q0):
    idx = [PHASE_INDEX[p] for p in branch.phases]
    zsub = branch.z[np.ix_(idx, idx)]
    k = len(idx)
    eye = np.eye(k)
    d = np.diag

    zalpha = zsub / (v0[:, None] * np.conj(v0)[None, :])
    ra, xa = zalpha.real, zalpha.imag
    zbeta = np.conj(v0[:, None] / v0[None, :]) * zsub
    rb, xb = zbeta.real, zbeta.imag
    zgamma = zsub / np.conj(v0)[None, :]
    rg, xg = zgamma.real, zgamma.imag

    # quadratic loss forms h_p, h_q and their jacobians at the center
    h_p0 = p0 * (ra @ p0 + xa @ q0) + q0 * (ra @ q0 - xa @ p0)
    h_q0 = p0 * (xa @ p0 - ra @ q0) + q0 * (ra @ p0 + xa @ q0)
    jpp = d(ra @ p0 + xa @ q0) + d(p0) @ ra - d(q0) @ xa
    jpq = d(p0) @ xa + d(ra @ q0 - xa @ p0) + d(q0) @ ra
    jqp = d(xa @ p0 - ra @ q0) + d(p0) @ xa + d(q0) @ ra
    jqq = d(ra @ p0 + xa @ q0) - d(p0) @ ra + d(q0) @ xa

    g_p = eye - jpp
    b_p = -jpq
    l_p = jpp @ p0 + jpq @ q0 - h_p0
    g_q = -jqp
    b_q = eye - jqq
    l_q = jqp @ p0 + jqq @ q0 - h_q0

    # quadratic term of the squared-voltage drop and its gradient
    a0 = rg @ p0 + xg @ q0
    b0 = xg @ p0 - rg @ q0
    h_u0 = a0 ** 2 + b0 ** 2
    f_p = 2 * (d(a0) @ rg + d(b0) @ xg)
    f_q = 2 * (d(a0) @ xg - d(b0) @ rg)

    g_u = 2 * rb - f_p
    b_u = 2 * xb - f_q
    l_u = h_u0 - f_p @ p0 - f_q @ q0
    return BranchLin(phases=branch.phases,
                     g_u=g_u, b_u=b_u, l_u=l_u,
                     g_p=g_p, b_p=b_p, l_p=l_p,
                     g_q=g_q, b_q=b_q, l_q=l_q)


def build_lbpf2(network, op):
    """Level-2 coefficients anchored at an operating point."""
    per_branch = {}
    for bid in op.closed:
        br = network.branches[bid]
        v0 = np.asarray(op.v0[bid], dtype=complex)
        if np.any(v0 == 0):
            raise ModelError(f"branch {bid}: operating voltage has a zero phase")
        per_branch[bid] = _branch_lbpf2(br, v0, np.asarray(op.p0[bid], float),
                                        np.asarray(op.q0[bid], float))
    return LinCoeffs(model="lbpf2", per_branch=per_branch,
                     closed=op.closed, taps=dict(op.taps))


@dataclass(frozen=True)
class LinearState:
    u: dict            # bus -> {phase: squared voltage}
    p: dict            # branch -> {phase: sending-end real power}
    q: dict
    model: str
    closed: frozenset
    taps: dict

    def loss_estimate(self, coeffs):
        """Per-branch complex loss implied by the linear balance terms."""
        out = {}
        for bid, lin in coeffs.per_branch.items():
            p = np.array([self.p[bid][ph] for ph in lin.phases])
            q = np.array([self.q[bid][ph] for ph in lin.phases])
            lp, lq = lin.loss_p(p, q), lin.loss_q(p, q)
            out[bid] = {ph: complex(lp[k], lq[k]) for k, ph in enumerate(lin.phases)}
        return out

    def total_loss(self, coeffs):
        return sum(sum(ph.values()) for ph in self.loss_estimate(coeffs).values())


def linear_solve(network, coeffs, injections):
    """Solve the linear power-flow model for one injection case.

    Topology and taps come from the coefficient container; the injections'
    own topology, if set, must agree with it.
    """
    closed = coeffs.closed
    if injections.closed is not None and frozenset(injections.closed) != closed:
        raise ModelError("injections and coefficients disagree on the closed set")
    taps = resolve_taps(network, closed, coeffs.taps)
    for bid, tap in (injections.taps or {}).items():
        if bid in taps and taps[bid] != tap:
            raise ModelError(f"injections and coefficients disagree on tap of {bid}")

    u_ids, p_ids, q_ids = {}, {}, {}
    for i, bus in network.buses.items():
        for ph in bus.phases:
            u_ids[(i, ph)] = len(u_ids)
    off_p = len(u_ids)
    for bid in sorted(closed):
        for ph in network.branches[bid].phases:
            p_ids[(bid, ph)] = off_p + len(p_ids)
    off_q = off_p + len(p_ids)
    for key in p_ids:
        q_ids[key] = off_q + len(q_ids)
    n = off_q + len(q_ids)

    rows, cols, vals, rhs = [], [], [], []

    def add(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    nrow = 0
    # root voltages pinned
    for rid in network.roots:
        for ph in network.buses[rid].phases:
            add(nrow, u_ids[(rid, ph)], 1.0)
            rhs.append(abs(network.root_voltage(ph)) ** 2)
            nrow += 1

    # branch voltage-drop rows
    for bid in sorted(closed):
        br = network.branches[bid]
        lin = coeffs.per_branch[bid]
        tau2 = 1.0
        if br.transformer is not None:
            tau2 = br.transformer.ratio(taps[bid]) ** 2
        for a, ph in enumerate(br.phases):
            add(nrow, u_ids[(br.from_bus, ph)], 1.0)
            add(nrow, u_ids[(br.to_bus, ph)], -tau2)
            for b, ph2 in enumerate(br.phases):
                add(nrow, p_ids[(bid, ph2)], -lin.g_u[a, b])
                add(nrow, q_ids[(bid, ph2)], -lin.b_u[a, b])
            rhs.append(-lin.l_u[a])
            nrow += 1

    # nodal balance rows
    for i, bus in network.buses.items():
        if bus.is_root:
            continue
        for ph in bus.phases:
            k_p, k_q = nrow, nrow + 1
            rp = -injections.injection(i, ph).real
            rq = -injections.injection(i, ph).imag
            touched = False
            for bid in sorted(closed):
                br = network.branches[bid]
                if ph not in br.phases:
                    continue
                lin = coeffs.per_branch[bid]
                a = br.phases.index(ph)
                if br.to_bus == i:
                    touched = True
                    for b, ph2 in enumerate(br.phases):
                        add(k_p, p_ids[(bid, ph2)], lin.g_p[a, b])
                        add(k_p, q_ids[(bid, ph2)], lin.b_p[a, b])
                        add(k_q, p_ids[(bid, ph2)], lin.g_q[a, b])
                        add(k_q, q_ids[(bid, ph2)], lin.b_q[a, b])
                    rp -= lin.l_p[a]
                    rq -= lin.l_q[a]
                elif br.from_bus == i:
                    touched = True
                    add(k_p, p_ids[(bid, ph)], -1.0)
                    add(k_q, q_ids[(bid, ph)], -1.0)
            if not touched:
                raise ModelError(f"bus {i} phase {ph} is not fed by any closed branch")
            rhs.extend([rp, rq])
            nrow += 2

    if nrow != n:
        raise ModelError(f"linear model is not square: {nrow} equations, {n} unknowns")
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    sol = spla.spsolve(mat, np.asarray(rhs))

    u = {i: {} for i in network.buses}
    for (i, ph), k in u_ids.items():
        u[i][ph] = float(sol[k])
    p = {bid: {} for bid in closed}
    q = {bid: {} for bid in closed}
    for (bid, ph), k in p_ids.items():
        p[bid][ph] = float(sol[k])
    for (bid, ph), k in q_ids.items():
        q[bid][ph] = float(sol[k])
    return LinearState(u=u, p=p, q=q, model=coeffs.model, closed=closed, taps=taps)
