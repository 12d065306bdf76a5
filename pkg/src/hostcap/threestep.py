"""Capacity refinement on a loss-aware linearization.

The assessments in `dccam`/`rccam` run on the lossless level-1 network model,
whose voltage errors lean optimistic under heavy export.  Refinement replays
the returned schedule through the exact sweep solver, re-linearizes every
closed branch around the solved operating points (level 2), and re-maximizes
the hosting capacity as a pure LP with the discrete controls frozen: topology,
taps and capacitor steps keep their assessed values while the capacities and
the continuous reactive dispatch are re-optimized.  A fixed-point loop around
the same machinery estimates the self-consistent capacity and serves as the
accuracy yardstick for both model levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from . import milp, sweep
from .dccam import (AnmOptions, AssessmentResult, UncertaintyRealization,
                    assess_deterministic)
from .lbpf import OperatingPoint, build_lbpf2
from .netmodel import ModelError, predicted_load
from .rccam import CcgOptions, ccg_solve, realized_injections

SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class RefinedResult:
    """Outcome of one assess / replay / re-maximize pass."""

    base: AssessmentResult        # level-1 assessment driving the schedule
    refined: AssessmentResult     # re-maximized capacities and dispatch
    scenarios: tuple              # realizations the refinement guarded
    op_points: dict               # (scenario label, t) -> OperatingPoint
    worst_violation: float        # exact-replay voltage-bound excess, pu^2
    trace: object | None = None   # bound trace when step 1 was robust

    @property
    def capacity_base(self):
        return self.base.objective

    @property
    def capacity_refined(self):
        return self.refined.objective


@dataclass(frozen=True)
class TruthResult:
    """Fixed point of the refinement map, used as the accuracy reference."""

    capacity: float
    result: AssessmentResult
    rounds: int
    converged: bool
    history: tuple


def _dedupe(realizations):
    out, seen = [], set()
    for real in realizations:
        if real.key() not in seen:
            seen.add(real.key())
            out.append(real)
    return out


def operating_points(network, scenario, decisions, realizations):
    """Exact sweep states for each (realization, period) under a schedule."""
    points = {}
    for real in realizations:
        for t in scenario.periods:
            inj = realized_injections(network, scenario, real, decisions, t)
            state = sweep.solve(network, inj)
            points[(real.label, t)] = OperatingPoint.from_state(network, state)
    return points


def replay_violation(network, scenario, decisions, realizations):
    """Largest voltage-bound excess (pu^2) of a schedule under exact replay."""
    worst = 0.0
    for real in realizations:
        for t in scenario.periods:
            inj = realized_injections(network, scenario, real, decisions, t)
            state = sweep.solve(network, inj)
            for i, bus in network.buses.items():
                if bus.is_root:
                    continue
                for ph in bus.phases:
                    u = state.u(i, ph)
                    worst = max(worst, u - bus.u_max[ph], bus.u_min[ph] - u)
    return max(worst, 0.0)


def _u_name(i, ph, t, label):
    return f"u[{i},{ph},t{t}]@{label}"


def _f_name(kind, bid, ph, t, label):
    return f"{kind}[{bid},{ph},t{t}]@{label}"


def build_refine_lp(network, scenario, decisions, realizations, coeffs):
    """Capacity LP on anchored level-2 coefficients with frozen discretes.

    One state copy (voltages, branch flows) per (realization, period); the
    capacities are global and the continuous reactive dispatch is shared per
    period across realizations, matching its schedule role.  `coeffs` maps
    (realization label, period) to the level-2 coefficient container built
    around that replay's operating point.
    """
    model = milp.MilpModel(name="refine", sense="max")
    y_names = {}
    for i, site in sorted(network.dg_sites.items()):
        for ph in site.phases:
            yn = f"y[{i},{ph}]"
            y_names[(i, ph)] = yn
            model.add_var(yn, lb=0.0, ub=site.y_max.get(ph, math.inf))
            model.add_objective_term(yn, 1.0)

    qc_names, qdg_names = {}, {}
    for t in scenario.periods:
        for dev in network.var_devices:
            if dev.kind != "continuous":
                continue
            for ph in dev.phases:
                qn = f"qc[{dev.bus},{ph},t{t}]"
                qc_names[(t, dev.bus, ph)] = qn
                model.add_var(qn, lb=dev.q_min, ub=dev.q_max)
        for i, site in sorted(network.dg_sites.items()):
            for ph in site.phases:
                qn = f"qdg[{i},{ph},t{t}]"
                qdg_names[(t, i, ph)] = qn
                model.add_var(qn, lb=-math.inf, ub=math.inf)

    for real in realizations:
        for t in scenario.periods:
            _state_block(model, network, scenario, decisions, real, t,
                         coeffs[(real.label, t)], y_names, qc_names, qdg_names)
    return model, (y_names, qc_names, qdg_names)


def _state_block(model, network, scenario, decisions, real, t, lin,
                 y_names, qc_names, qdg_names):
    label = real.label
    closed = decisions.topology[t]
    if frozenset(lin.closed) != frozenset(closed):
        raise ModelError(
            f"coefficients for {label} t{t} were built on a different "
            "closed set than the schedule")

    for i, bus in network.buses.items():
        for ph in bus.phases:
            un = _u_name(i, ph, t, label)
            if bus.is_root:
                u0 = abs(network.root_voltage(ph)) ** 2
                model.add_var(un, lb=u0, ub=u0)
            else:
                model.add_var(un, lb=bus.u_min[ph], ub=bus.u_max[ph])
    for bid in sorted(closed):
        br = network.branches[bid]
        for ph in br.phases:
            pn = _f_name("fp", bid, ph, t, label)
            qn = _f_name("fq", bid, ph, t, label)
            model.add_var(pn, lb=-math.inf, ub=math.inf)
            model.add_var(qn, lb=-math.inf, ub=math.inf)
            s = br.s_max.get(ph, math.inf)
            if math.isfinite(s):
                for sgn in (1.0, -1.0):
                    model.add_constr({pn: sgn}, "<=", s)
                    model.add_constr({qn: sgn}, "<=", s)
                    model.add_constr({pn: sgn, qn: sgn}, "<=", SQRT2 * s)
                    model.add_constr({pn: sgn, qn: -sgn}, "<=", SQRT2 * s)

    for bid in sorted(closed):
        br = network.branches[bid]
        bl = lin.per_branch[bid]
        tau2 = 1.0
        if br.transformer is not None:
            tau2 = br.transformer.ratio(decisions.taps[t].get(bid, 0)) ** 2
        for a, ph in enumerate(br.phases):
            row = {_u_name(br.from_bus, ph, t, label): 1.0,
                   _u_name(br.to_bus, ph, t, label): -tau2}
            for b, ph2 in enumerate(br.phases):
                row[_f_name("fp", bid, ph2, t, label)] = -bl.g_u[a, b]
                row[_f_name("fq", bid, ph2, t, label)] = -bl.b_u[a, b]
            model.add_constr(row, "==", -bl.l_u[a])

    for i, bus in network.buses.items():
        if bus.is_root:
            continue
        site = network.dg_sites.get(i)
        ef = real.eta_factor(scenario, i, t)
        lf = real.load_factor(scenario, i, t)
        for ph in bus.phases:
            row_p, row_q = {}, {}
            dem = predicted_load(network, scenario, i, ph, t) * lf
            rhs_p, rhs_q = dem.real, dem.imag
            fed = False
            for bid in sorted(closed):
                br = network.branches[bid]
                if ph not in br.phases:
                    continue
                bl = lin.per_branch[bid]
                a = br.phases.index(ph)
                if br.to_bus == i:
                    fed = True
                    for b, ph2 in enumerate(br.phases):
                        pn = _f_name("fp", bid, ph2, t, label)
                        qn = _f_name("fq", bid, ph2, t, label)
                        row_p[pn] = row_p.get(pn, 0.0) + bl.g_p[a, b]
                        row_p[qn] = row_p.get(qn, 0.0) + bl.b_p[a, b]
                        row_q[pn] = row_q.get(pn, 0.0) + bl.g_q[a, b]
                        row_q[qn] = row_q.get(qn, 0.0) + bl.b_q[a, b]
                    rhs_p -= bl.l_p[a]
                    rhs_q -= bl.l_q[a]
                elif br.from_bus == i:
                    fed = True
                    pn = _f_name("fp", bid, ph, t, label)
                    qn = _f_name("fq", bid, ph, t, label)
                    row_p[pn] = row_p.get(pn, 0.0) - 1.0
                    row_q[qn] = row_q.get(qn, 0.0) - 1.0
            if not fed:
                raise ModelError(
                    f"bus {i} phase {ph} is not fed by any closed branch "
                    f"in period {t}")
            if site is not None and ph in site.phases:
                eta = scenario.eta(i, ph, t) * ef
                row_p[y_names[(i, ph)]] = eta
                row_q[qdg_names[(t, i, ph)]] = 1.0
            if (t, i, ph) in qc_names:
                row_q[qc_names[(t, i, ph)]] = 1.0
            steps = decisions.sc_steps.get(t, {}).get((i, ph), 0)
            if steps:
                dev = next(d for d in network.var_devices
                           if d.bus == i and d.kind == "discrete"
                           and ph in d.phases)
                rhs_q -= dev.delta_q * steps
            model.add_constr(row_p, "==", rhs_p)
            model.add_constr(row_q, "==", rhs_q)

        if site is not None:
            tmin, tmax = math.tan(site.theta_min), math.tan(site.theta_max)
            for ph in site.phases:
                eta = scenario.eta(i, ph, t) * ef
                yn, qn = y_names[(i, ph)], qdg_names[(t, i, ph)]
                model.add_constr({qn: 1.0, yn: -tmax * eta}, "<=", 0.0)
                model.add_constr({qn: -1.0, yn: tmin * eta}, "<=", 0.0)


def solve_refine_lp(network, scenario, decisions, realizations, coeffs,
                    params=None):
    """Solve the anchored capacity LP; returns a refined AssessmentResult."""
    model, (y_names, qc_names, qdg_names) = build_refine_lp(
        network, scenario, decisions, realizations, coeffs)
    res = model.solve(params=params)
    if res.status != milp.SolverStatus.OPTIMAL:
        raise milp.SolverError(
            f"refinement LP {res.status}: {res.message}")
    y = {key: res.value(yn) for key, yn in y_names.items()}
    q_svc = {t: {} for t in scenario.periods}
    for (t, i, ph), qn in qc_names.items():
        q_svc[t][(i, ph)] = res.value(qn)
    q_dg = {t: {} for t in scenario.periods}
    for (t, i, ph), qn in qdg_names.items():
        q_dg[t][(i, ph)] = res.value(qn)
    return replace(decisions, objective=res.objective, y=y, q_svc=q_svc,
                   q_dg=q_dg, status="optimal", gap=res.gap, bound=None,
                   check_violation=0.0)


def refine(network, scenario, decisions, realizations, params=None):
    """One replay-and-re-maximize pass for a given schedule."""
    reals = _dedupe(realizations)
    points = operating_points(network, scenario, decisions, reals)
    coeffs = {key: build_lbpf2(network, op) for key, op in points.items()}
    refined = solve_refine_lp(network, scenario, decisions, reals, coeffs,
                              params=params)
    return refined, points


def three_step(network, scenario, opts=None, mode="robust", ccg=None,
               params=None):
    """Assess, replay exactly, re-maximize on the anchored model.

    `mode="robust"` runs the two-stage assessment and refines against the
    enumerated worst-case realizations; `mode="deterministic"` refines the
    nominal assessment against the nominal scenario only.
    """
    opts = opts or AnmOptions()
    trace = None
    if mode == "robust":
        outcome = ccg_solve(network, scenario, opts=opts, ccg=ccg)
        base, trace = outcome.result, outcome.trace
        reals = _dedupe(outcome.worst_cases)
    elif mode == "deterministic":
        run_params = params or (ccg.params if ccg is not None else None)
        base = assess_deterministic(network, scenario, opts=opts,
                                    params=run_params)
        reals = [UncertaintyRealization.nominal()]
    else:
        raise milp.ConfigError(f"unknown refinement mode {mode!r}")

    refined, points = refine(network, scenario, base, reals, params=params)
    violation = replay_violation(network, scenario, refined, reals)
    return RefinedResult(base=base, refined=refined, scenarios=tuple(reals),
                         op_points=points, worst_violation=violation,
                         trace=trace)


def _blend(new, old, weight):
    y = {k: weight * new.y.get(k, 0.0) + (1 - weight) * old.y.get(k, 0.0)
         for k in set(new.y) | set(old.y)}

    def mix(a, b):
        return {t: {k: weight * a[t].get(k, 0.0) + (1 - weight) * b[t].get(k, 0.0)
                    for k in set(a[t]) | set(b[t])} for t in a}

    return replace(new, y=y, q_svc=mix(new.q_svc, old.q_svc),
                   q_dg=mix(new.q_dg, old.q_dg),
                   objective=sum(y.values()))


def iterate_truth(network, scenario, decisions, realizations, tol=1e-4,
                  max_rounds=50, damping=0.5, params=None):
    """Fixed point of the refinement map: re-anchor on each new solution.

    The capacity sequence usually settles in a few rounds; when it starts
    alternating, the deployed schedule is damped toward the previous one to
    restore contraction.  Convergence is declared on the relative change of
    the total capacity.
    """
    reals = _dedupe(realizations)
    current = decisions
    history = [current.objective]
    for rounds in range(1, max_rounds + 1):
        nxt, _ = refine(network, scenario, current, reals, params=params)
        history.append(nxt.objective)
        move = abs(history[-1] - history[-2])
        if move <= tol * max(1.0, abs(history[-1])):
            return TruthResult(capacity=nxt.objective, result=nxt,
                               rounds=rounds, converged=True,
                               history=tuple(history))
        if (len(history) >= 3
                and (history[-1] - history[-2]) * (history[-2] - history[-3]) < 0):
            nxt = _blend(nxt, current, damping)
        current = nxt
    return TruthResult(capacity=current.objective, result=current,
                       rounds=max_rounds, converged=False,
                       history=tuple(history))
