"""Robust capacity assessment via column-and-constraint generation.

The deterministic builder tags every row with its coefficient split
(capacity / grid state / schedule / indicators / capacity-indicator
products), so the worst-case subproblem here is generated mechanically: fold
the schedule into the right-hand side, attach one multiplier per row
(nonnegative for inequalities, free for equalities), transpose the tags into
dual-feasibility rows, and linearize multiplier-indicator products with
big-M rows keyed to the multiplier cap.

The outer loop alternates the multi-scenario master (upper bound; shared
capacity and schedule, one grid-state copy per enumerated realization) with
the dual subproblem (lower bound; worst realization for the master's
schedule) until the bounds close.  Every subproblem solution is audited
against the primal inner LP at the returned realization; a failed audit or a
multiplier at its cap triggers a retry with a larger cap, since a binding
cap invalidates the dual bound.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

from . import milp
from .dccam import (AnmOptions, UncertaintyRealization, aname, build_blocks,
                    solve_master)
from .netmodel import predicted_load
from .sweep import InjectionSet


@dataclass
class SubIndex:
    mu: list              # (mu name, row, period tag) per dualized row
    theta: dict           # (mu name, a name) -> theta name
    a_names: list
    m_mu: float


@dataclass
class CcgOptions:
    gamma: float = 1e-4          # relative to the nominal objective by default
    gamma_absolute: bool = False
    max_iter: int = 20
    m_mu: float = 100.0
    audit_tol: float = 1e-6
    audit_retries: int = 3
    params: milp.SolveParams = field(default_factory=milp.SolveParams)
    sub_params: milp.SolveParams | None = None   # defaults to `params`

    def sub_solve_params(self):
        return self.sub_params if self.sub_params is not None else self.params


@dataclass
class CcgIteration:
    k: int
    lower: float
    upper: float
    worst: UncertaintyRealization
    master_time: float
    sub_time: float
    audit_gap: float              # inf: feasibility cut; nan: uncertified
    master_status: str = milp.SolverStatus.OPTIMAL
    sub_status: str = milp.SolverStatus.OPTIMAL
    cut_value: float = math.nan   # primal worst-case value of the cut


@dataclass(frozen=True)
class SubResult:
    certified: float              # proven worst-case value, else -inf
    worst: UncertaintyRealization
    audit_gap: float              # inf: no recourse; nan: unproven solve
    status: str
    cut_value: float              # audited primal value of `worst`


@dataclass
class CcgTrace:
    iterations: list = field(default_factory=list)
    converged: bool = False
    gamma: float = 0.0
    message: str = ""

    def bounds(self):
        return [(it.lower, it.upper) for it in self.iterations]


@dataclass
class RobustOutcome:
    result: object                # AssessmentResult at the certified schedule
    trace: CcgTrace
    worst_cases: list             # enumerated realizations (nominal first)

    def __iter__(self):
        return iter((self.result, self.trace, self.worst_cases))


def _all_rows(blocks):
    for row in blocks.y_rows:
        yield row
    for blk in blocks.periods:
        for row in blk.rows:
            yield row


def fold_schedule(row, z_star):
    """Constant contribution of the fixed schedule to a tagged row."""
    shift = 0.0
    for zn, c in row.z.items():
        v = z_star.get(zn)
        if v is None:
            raise milp.ConfigError(f"schedule value missing for {zn!r}")
        shift += c * v
    return row.rhs - shift


def build_dual_sub(blocks, z_star, m_mu=1e4):
    """Dual of the inner capacity maximization for a fixed schedule.

    Minimizes the worst-case (over budget-feasible indicators) capacity using
    one multiplier per primal row and exact big-M products between
    multipliers and indicators.
    """
    model = milp.MilpModel(name="worst-case", sense="min")

    a_names = []
    for blk in blocks.periods:
        for an in blk.a_vars:
            a_names.append(an)
            model.add_var(an, kind="B")
        if blk.budget is not None:
            model.add_constr({an: 1.0 for an in blk.a_vars}, "<=",
                             float(blk.budget), f"budget[t{blk.t}]")
        for an, (kind, bus) in blk.a_vars.items():
            if kind in ("Gu", "Lu"):
                twin = aname("Gd" if kind == "Gu" else "Ld", bus, blk.t)
                model.add_constr({an: 1.0, twin: 1.0}, "<=", 1.0,
                                 f"excl[{an}]")

    mu_list = []
    theta = {}
    y_cols = {yn: {} for yn in blocks.y_vars}     # yn -> {var: coef}
    u_cols = {}
    objective = {}

    def theta_var(mn, an, free):
        # exact product theta = mu * a for binary a and |mu| <= m_mu
        key = (mn, an)
        th = theta.get(key)
        if th is not None:
            return th
        th = f"th({mn},{an})"
        lo = -m_mu if free else 0.0
        model.add_var(th, lb=lo, ub=m_mu)
        model.add_constr({th: 1.0, an: -m_mu}, "<=", 0.0, f"{th}/cap+")
        model.add_constr({mn: 1.0, th: -1.0, an: m_mu}, "<=", m_mu,
                         f"{th}/ge")
        if free:
            model.add_constr({th: -1.0, an: -m_mu}, "<=", 0.0, f"{th}/cap-")
            model.add_constr({th: 1.0, mn: -1.0, an: m_mu}, "<=", m_mu,
                             f"{th}/le")
        else:
            model.add_constr({th: 1.0, mn: -1.0}, "<=", 0.0, f"{th}/le")
        theta[key] = th
        return th

    for r, row in enumerate(_all_rows(blocks)):
        free = row.sense == "=="
        mn = f"mu{r}"
        model.add_var(mn, lb=-m_mu if free else 0.0, ub=m_mu)
        mu_list.append((mn, row))
        g = fold_schedule(row, z_star)
        if g:
            objective[mn] = objective.get(mn, 0.0) + g
        for an, c in row.a.items():
            th = theta_var(mn, an, free)
            objective[th] = objective.get(th, 0.0) - c
        for yn, c in row.y.items():
            col = y_cols[yn]
            col[mn] = col.get(mn, 0.0) + c
        for (yn, an), c in row.ya.items():
            th = theta_var(mn, an, free)
            col = y_cols[yn]
            col[th] = col.get(th, 0.0) + c
        for un, c in row.u.items():
            col = u_cols.setdefault(un, {})
            col[mn] = col.get(mn, 0.0) + c

    for yn in sorted(y_cols):
        model.add_constr(y_cols[yn], "==", 1.0, f"dual[{yn}]")
    for un in sorted(u_cols):
        model.add_constr(u_cols[un], "==", 0.0, f"dual[{un}]")
    model.set_objective(objective)
    return model, SubIndex(mu=mu_list, theta=theta, a_names=a_names, m_mu=m_mu)


def realization_from(result, index, label):
    values = {an: (1.0 if result.value(an) > 0.5 else 0.0)
              for an in index.a_names}
    return UncertaintyRealization(values=values, label=label)


def mu_at_cap(result, index, rel=1e-6):
    """Multipliers whose value sits at the artificial cap (dual bound suspect)."""
    cap = index.m_mu * (1.0 - rel)
    return [mn for mn, _ in index.mu if abs(result.value(mn)) >= cap]


def build_inner_lp(blocks, z_star, realization):
    """Primal inner maximization at a fixed schedule and fixed indicators.

    All limits live in rows (variable bounds are dropped), matching the
    row set the dual prices; used for the strong-duality audit.
    """
    model = milp.MilpModel(name="inner", sense="max")
    for yn in blocks.y_vars:
        model.add_var(yn, lb=-math.inf, ub=math.inf)
        model.add_objective_term(yn, 1.0)
    for blk in blocks.periods:
        for un in blk.u_vars:
            model.add_var(un, lb=-math.inf, ub=math.inf)
    for row in _all_rows(blocks):
        coeffs = {}
        rhs = fold_schedule(row, z_star)
        for yn, c in row.y.items():
            coeffs[yn] = coeffs.get(yn, 0.0) + c
        for un, c in row.u.items():
            coeffs[un] = coeffs.get(un, 0.0) + c
        for an, c in row.a.items():
            rhs -= c * realization[an]
        for (yn, an), c in row.ya.items():
            if realization[an]:
                coeffs[yn] = coeffs.get(yn, 0.0) + c * realization[an]
        if coeffs:
            model.add_constr(coeffs, row.sense, rhs, name=row.name)
        elif (row.sense == "<=" and rhs < -1e-9) or (
                row.sense == "==" and abs(rhs) > 1e-9):
            raise milp.SolverError(
                f"inner LP: constant row {row.name} infeasible (rhs {rhs:g})")
    return model


def audit_strong_duality(blocks, z_star, realization, dual_objective,
                         params=None, tol=1e-6):
    """Gap between the dual bound and the primal inner LP at (z*, a*).

    Returns (math.inf, None) when the inner LP is infeasible: the schedule
    has no feasible recourse under this realization, so there is no finite
    primal value to compare against (the dual is unbounded below and the
    multiplier cap merely truncated its certificate ray).
    """
    inner = build_inner_lp(blocks, z_star, realization)
    res = inner.solve(params=params)
    if res.status == milp.SolverStatus.INFEASIBLE:
        return math.inf, None
    if res.status != milp.SolverStatus.OPTIMAL:
        raise milp.SolverError(
            f"strong-duality audit: inner LP {res.status}: {res.message}")
    gap = abs(res.objective - dual_objective)
    scale = max(1.0, abs(res.objective))
    return gap / scale, res


def screen_candidates(blocks):
    """Structured deviation patterns worth testing before the dual MILP.

    All nine sign combinations of a uniform generation-side and load-side
    deviation (up, down, unchanged), skipping the nominal one and any pattern
    that exceeds a period's budget.  Each is a plain inner LP to evaluate,
    so they provide cheap cut candidates and catch infeasible recourse early.
    """
    out = []
    for d_gen in (1, -1, 0):
        for d_load in (1, -1, 0):
            if d_gen == 0 and d_load == 0:
                continue
            want = {1: "Gu", -1: "Gd"}.get(d_gen), {1: "Lu", -1: "Ld"}.get(d_load)
            values, ok = {}, True
            for blk in blocks.periods:
                count = 0
                for an in blk.a_vars:
                    kind = an[1:an.index("[")]
                    if kind in want:
                        values[an] = 1.0
                        count += 1
                if blk.budget is not None and count > blk.budget:
                    ok = False
                    break
            if ok and values:
                tag_g = {1: "dg+", -1: "dg-", 0: ""}[d_gen]
                tag_l = {1: "load+", -1: "load-", 0: ""}[d_load]
                label = "screen(" + ",".join(x for x in (tag_g, tag_l) if x) + ")"
                out.append(UncertaintyRealization(values=values, label=label))
    return out


def _no_deviation(blocks):
    """True when no admissible realization can move off the forecast."""
    return all(not blk.a_vars or blk.budget == 0 for blk in blocks.periods)


def _solve_sub_fixed(blocks, z_star, label):
    """Degenerate subproblem with an empty uncertainty set."""
    nominal = UncertaintyRealization.nominal()
    res = build_inner_lp(blocks, z_star, nominal).solve()
    if res.status == milp.SolverStatus.INFEASIBLE:
        return SubResult(-math.inf, nominal, math.inf, "fixed", -math.inf)
    if res.status != milp.SolverStatus.OPTIMAL:
        raise milp.SolverError(
            f"nominal inner LP: {res.status}: {res.message}")
    return SubResult(res.objective, nominal, 0.0, "fixed", res.objective)


def _restrict_to_period(blocks, blk):
    """Single-period view keeping only the capacities this period prices.

    Capacity variables absent from the period's rows are dropped from the
    view (their contribution is unconstrained here and belongs to other
    periods); capacity-only rows touching a dropped variable go with them.
    """
    named = set()
    for row in blk.rows:
        named.update(row.y)
        named.update(yn for yn, _ in row.ya)
    y_rows = [row for row in blocks.y_rows
              if named.issuperset(row.y)
              and named.issuperset(yn for yn, _ in row.ya)]
    return replace(blocks,
                   y_vars={yn: b for yn, b in blocks.y_vars.items()
                           if yn in named},
                   y_rows=y_rows, periods=[blk])


def _solve_sub_decomposed(blocks, z_star, opts, label):
    """Multi-period subproblem via per-period worst-case generation.

    Periods share nothing but the capacity vector, so each period's dual
    MILP is solved on its own restricted view and the per-period worst
    indicators are merged into one candidate realization, evaluated exactly
    by the joint inner LP.  The merged realization respects every budget
    (budgets are per-period).  The minimum over the joint adversary can sit
    below the best merged candidate, so no certification is claimed: cuts
    are honest, the lower bound is not updated.
    """
    best_cand, best_val = None, math.inf
    for cand in screen_candidates(blocks):
        res = build_inner_lp(blocks, z_star, cand).solve()
        if res.status == milp.SolverStatus.INFEASIBLE:
            return SubResult(-math.inf, cand, math.inf, "screened", -math.inf)
        if res.status == milp.SolverStatus.OPTIMAL and res.objective < best_val:
            best_cand, best_val = cand, res.objective

    coupled = [blk for blk in blocks.periods
               if blk.a_vars and blk.budget != 0
               and any(row.y or row.ya for row in blk.rows)]
    limit = opts.sub_solve_params().time_limit
    if limit is not None and coupled:
        limit = max(10.0, limit / len(coupled))
    per_opts = replace(
        opts, sub_params=replace(opts.sub_solve_params(), time_limit=limit))
    merged = {}
    for blk in coupled:
        view = _restrict_to_period(blocks, blk)
        part = solve_sub(view, z_star, per_opts, label=f"{label}/t{blk.t}")
        if math.isinf(part.audit_gap):
            # This period alone has no feasible recourse under part.worst
            # (other periods nominal): a valid feasibility cut as-is.
            return SubResult(-math.inf, part.worst, math.inf, part.status,
                             -math.inf)
        merged.update(part.worst.values)
    if merged:
        cand = UncertaintyRealization(values=merged, label=label)
        res = build_inner_lp(blocks, z_star, cand).solve()
        if res.status == milp.SolverStatus.INFEASIBLE:
            return SubResult(-math.inf, cand, math.inf, "merged", -math.inf)
        if res.status == milp.SolverStatus.OPTIMAL and res.objective < best_val:
            best_cand, best_val = cand, res.objective
    if best_cand is None:
        return _solve_sub_fixed(blocks, z_star, label)
    return SubResult(-math.inf, best_cand, math.nan, "decomposed", best_val)


def solve_sub(blocks, z_star, opts, label):
    """Worst-case subproblem: primal screening, then the dual MILP.

    The screening pass evaluates structured deviation patterns as plain
    inner LPs; an infeasible one is returned immediately as a feasibility
    cut (certified bound -inf, infinite audit gap).  The dual MILP then
    searches the full vertex set.  When it proves optimality and passes the
    strong-duality audit, its objective is the certified worst-case value.
    When it only reaches a time limit, no certification is claimed: the
    audit gap is NaN and the cut is whichever audited realization — MILP
    incumbent or screened pattern — achieved the lowest primal value.

    Multi-period instances are decomposed per period (the dual MILP over a
    whole horizon is far beyond open solvers); see _solve_sub_decomposed.

    Multipliers sitting at the cap do not by themselves invalidate a proven
    solve: dual degeneracy lets the solver park a multiplier at any large
    value on the optimal face.  The cap is only treated as binding when
    relaxing it tenfold moves the objective.
    """
    if _no_deviation(blocks):
        return _solve_sub_fixed(blocks, z_star, label)
    if len(blocks.periods) > 1:
        return _solve_sub_decomposed(blocks, z_star, opts, label)

    best_cand, best_val = None, math.inf
    for cand in screen_candidates(blocks):
        res = build_inner_lp(blocks, z_star, cand).solve()
        if res.status == milp.SolverStatus.INFEASIBLE:
            return SubResult(-math.inf, cand, math.inf, "screened", -math.inf)
        if res.status == milp.SolverStatus.OPTIMAL and res.objective < best_val:
            best_cand, best_val = cand, res.objective

    m_mu = opts.m_mu
    last = None
    prev_obj = None
    for attempt in range(opts.audit_retries + 1):
        sub, index = build_dual_sub(blocks, z_star, m_mu=m_mu)
        res = sub.solve(params=opts.sub_solve_params())
        if res.status == milp.SolverStatus.UNBOUNDED:
            raise milp.SolverError(
                "worst-case subproblem unbounded: the inner LP is infeasible "
                "for some realization (instance cannot serve its load)")
        if res.status != milp.SolverStatus.OPTIMAL and res.values is None:
            raise milp.SolverError(
                f"worst-case subproblem: {res.status}: {res.message}")
        worst = realization_from(res, index, label)
        gap, inner = audit_strong_duality(blocks, z_star, worst, res.objective,
                                          params=opts.params,
                                          tol=opts.audit_tol)
        if math.isinf(gap):
            return SubResult(-math.inf, worst, math.inf, res.status, -math.inf)

        if res.status != milp.SolverStatus.OPTIMAL:
            # Time-limited: use the incumbent's exact primal value to pick
            # the strongest cut, but certify nothing.
            value = inner.objective
            if value > best_val:
                worst, value = best_cand, best_val
            return SubResult(-math.inf, worst, math.nan, res.status, value)

        scale = max(1.0, abs(res.objective))
        stable = (prev_obj is not None
                  and abs(res.objective - prev_obj) <= opts.audit_tol * scale)
        last = (res.objective, worst, gap)
        if gap <= opts.audit_tol and (stable or not mu_at_cap(res, index)):
            return SubResult(res.objective, worst, gap, res.status,
                             res.objective)
        prev_obj = res.objective
        m_mu *= 10.0
    raise milp.SolverError(
        f"strong-duality audit failed after {opts.audit_retries + 1} tries: "
        f"gap {last[2]:.3e}, multiplier cap reached {m_mu:g}")


def ccg_solve(network, scenario, opts=None, ccg=None):
    """Two-stage robust assessment; returns RobustOutcome.

    The master's capacity/schedule is feasible for every enumerated
    realization; the certified objective is the subproblem's worst-case value
    at the final schedule.  A time-limited master contributes its solver
    bound (not its incumbent) to the upper-bound ledger, so the trace stays
    a true bound sandwich even when optimality is not proven.  A realization
    with no feasible recourse is enforced as a feasibility cut (it appears in
    the trace with an infinite audit gap and leaves the lower bound alone).
    """
    anm = opts or AnmOptions()
    ccg = ccg or CcgOptions()
    blocks = build_blocks(network, scenario, anm)

    realizations = [UncertaintyRealization.nominal()]
    seen = {realizations[0].key()}
    lower, upper = -math.inf, math.inf
    gamma = ccg.gamma
    trace = CcgTrace(gamma=gamma)
    best = None
    incumbent = None
    active = None

    for k in range(1, ccg.max_iter + 1):
        t0 = time.perf_counter()
        try:
            outcome, index, active = solve_master(
                blocks, realizations, params=ccg.params, start_periods=active)
        except milp.SolverError as exc:
            raise milp.SolverError(
                f"master failed at iteration {k} with "
                f"{len(realizations)} scenarios "
                f"({[r.label for r in realizations]}): {exc}") from exc
        master_time = time.perf_counter() - t0
        incumbent = (outcome, list(realizations))
        if outcome.status == milp.SolverStatus.OPTIMAL:
            master_ub = outcome.objective
        elif outcome.bound is not None:
            master_ub = outcome.bound
        else:
            master_ub = math.inf
        upper = min(upper, master_ub)
        if k == 1 and not ccg.gamma_absolute:
            gamma = ccg.gamma * max(1.0, abs(outcome.objective))
            trace.gamma = gamma

        z_star = outcome.z_values(blocks)
        t0 = time.perf_counter()
        sub = solve_sub(blocks, z_star, ccg, label=f"iter{k}")
        sub_time = time.perf_counter() - t0
        worst = sub.worst
        if sub.certified > lower:
            lower = sub.certified
            best = (outcome, list(realizations), worst)
        trace.iterations.append(CcgIteration(
            k=k, lower=lower, upper=upper, worst=worst,
            master_time=master_time, sub_time=sub_time,
            audit_gap=sub.audit_gap, master_status=outcome.status,
            sub_status=sub.status, cut_value=sub.cut_value))

        if math.isinf(sub.audit_gap):
            # No feasible recourse under `worst`: enforce it as a pure
            # feasibility cut.  The schedule contributes no lower bound.
            if worst.key() in seen:
                raise milp.SolverError(
                    f"iteration {k}: realization {worst.label} is enforced "
                    "in the master yet its recourse LP is infeasible "
                    "(numerical contradiction; loosen tolerances or check "
                    "the instance)")
            seen.add(worst.key())
            realizations.append(worst)
            continue

        if lower - upper > gamma:
            # The shared-capacity master fell below a schedule's certified
            # adaptive worst-case value.  That happens when a first-stage
            # schedule forces a capacity floor under some realization (e.g.
            # scheduled reactive dispatch needing active export to hold the
            # voltage), so the master stops bounding the adaptive problem.
            # The certified value below is still exact for its schedule.
            trace.message = (
                f"bound inversion at iteration {k}: master "
                f"{upper:.6g} < certified worst case {lower:.6g}; "
                "shared-capacity master is not an upper bound for the "
                "adaptive worst case on this instance")
            break
        if upper - lower <= gamma:
            trace.converged = True
            trace.message = f"bounds closed at iteration {k}"
            break
        if worst.key() in seen:
            trace.message = (
                f"worst case repeated at iteration {k}; certificate gap "
                f"{upper - lower:.3e} (master bound did not close)")
            break
        seen.add(worst.key())
        realizations.append(worst)
    else:
        trace.message = f"iteration cap {ccg.max_iter} reached"

    if best is not None:
        outcome, enumerated, final_worst = best
        certified = replace(outcome, objective=lower)
        worst_cases = list(enumerated)
        if final_worst.key() not in {r.key() for r in worst_cases}:
            worst_cases.append(final_worst)
    elif incumbent is not None:
        # No subproblem ever certified a worst-case value (all were
        # feasibility cuts or hit their time limit).  Fall back to the last
        # master schedule: it is feasible for every enumerated realization,
        # but its objective is only the enumerated-scenario optimum.
        outcome, worst_cases = incumbent
        certified = outcome
        trace.message += ("; no certified worst-case value, reporting the "
                          "enumerated-scenario master objective")
    else:
        raise milp.SolverError("no master iteration completed")
    return RobustOutcome(result=certified, trace=trace, worst_cases=worst_cases)


def realized_injections(network, scenario, realization, decisions, t):
    """InjectionSet for one period under a realization and fixed decisions.

    Loads keep their power factor; DG active output is the realized
    efficiency times capacity; scheduled reactive dispatch is applied as-is.
    """
    s_inj = {}
    for i in sorted(network.buses):
        bus = network.buses[i]
        lf = realization.load_factor(scenario, i, t)
        for ph in bus.phases:
            dem = predicted_load(network, scenario, i, ph, t) * lf
            val = -dem
            site = network.dg_sites.get(i)
            if site is not None and ph in site.phases:
                ef = realization.eta_factor(scenario, i, t)
                p = scenario.eta(i, ph, t) * ef * decisions.y.get((i, ph), 0.0)
                q = decisions.q_dg.get(t, {}).get((i, ph), 0.0)
                val += complex(p, q)
            q_c = decisions.q_svc.get(t, {}).get((i, ph), 0.0)
            if q_c:
                val += complex(0.0, q_c)
            steps = decisions.sc_steps.get(t, {}).get((i, ph), 0)
            if steps:
                dev = next(d for d in network.var_devices
                           if d.bus == i and d.kind == "discrete"
                           and ph in d.phases)
                val += complex(0.0, dev.delta_q * steps)
            if val != 0 or ph in bus.load:
                s_inj[(i, ph)] = s_inj.get((i, ph), 0j) + val
    inj = {}
    for (i, ph), val in s_inj.items():
        inj.setdefault(i, {})[ph] = val
    return InjectionSet(s_inj=inj,
                        taps=dict(decisions.taps.get(t, {})),
                        closed=decisions.topology[t])


def worst_case_injections(network, scenario, realization, decisions):
    """Per-period injection sets realizing a worst case under fixed decisions."""
    return {t: realized_injections(network, scenario, realization, decisions, t)
            for t in scenario.periods}
