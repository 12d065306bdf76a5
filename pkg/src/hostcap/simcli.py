"""Monte Carlo validation, method comparison, and the command-line front end.

The simulation side deploys an assessed plan — capacities plus the per-period
schedule — and replays it through the exact sweep solver under randomly drawn
generation/load multipliers, with a protection rule that sheds all DG when any
voltage bound is violated.  The comparison driver reproduces the three-method
study (deterministic with full controls, robust without reconfiguration,
robust with full controls), and the budget sweep traces conservativeness
against the per-period deviation budget.  Reports are deterministic for a
fixed seed: no timestamps or wall-clock figures are written.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from . import milp, sweep
from .dccam import AnmOptions, assess_deterministic
from .lbpf import lbpf1_coeffs, build_lbpf2, linear_solve, OperatingPoint
from .netmodel import ModelError, ParseError, load_instance, predicted_load
from .rccam import CcgOptions, ccg_solve
from .sweep import InjectionSet
from .threestep import three_step


@dataclass(frozen=True)
class McResult:
    """Monte Carlo summary at one period for one deployed plan."""

    n: int
    period: int
    violations: int          # samples with a voltage-bound violation
    diverged: int            # samples whose exact replay did not converge
    avg_output: float        # mean delivered DG power (shed samples count 0)
    avg_output_served: float # mean over non-shed samples (nan if none)
    max_excess: float        # largest voltage-bound excess seen, pu^2

    @property
    def violation_rate(self):
        return (self.violations + self.diverged) / self.n


def _site_multipliers(rng, n, buses, dev):
    """Per-sample, per-bus truncated-normal multipliers around 1."""
    if dev <= 0.0:
        return {i: np.ones(n) for i in buses}
    dist = stats.truncnorm(-3.0, 3.0, loc=1.0, scale=dev / 3.0)
    return {i: dist.rvs(size=n, random_state=rng) for i in buses}


def sample_multipliers(network, n, dev_dg, dev_load, seed):
    """Draw per-bus generation and load multipliers for `n` scenarios."""
    rng = np.random.default_rng(seed)
    gen = _site_multipliers(rng, n, sorted(network.dg_sites), dev_dg)
    load_buses = [i for i, bus in network.buses.items() if bus.load]
    load = _site_multipliers(rng, n, load_buses, dev_load)
    return gen, load


def _deployed_injections(network, scenario, plan, t, gen_mult, load_mult):
    s_inj = {}
    for i, bus in network.buses.items():
        for ph in bus.phases:
            val = -predicted_load(network, scenario, i, ph, t) * load_mult.get(i, 1.0)
            site = network.dg_sites.get(i)
            if site is not None and ph in site.phases:
                p = scenario.eta(i, ph, t) * gen_mult.get(i, 1.0) * plan.y.get((i, ph), 0.0)
                q = plan.q_dg.get(t, {}).get((i, ph), 0.0)
                val += complex(p, q)
            q_c = plan.q_svc.get(t, {}).get((i, ph), 0.0)
            if q_c:
                val += 1j * q_c
            steps = plan.sc_steps.get(t, {}).get((i, ph), 0)
            if steps:
                dev = next(d for d in network.var_devices
                           if d.bus == i and d.kind == "discrete" and ph in d.phases)
                val += 1j * dev.delta_q * steps
            if val != 0:
                s_inj.setdefault(i, {})[ph] = val
    return InjectionSet(s_inj=s_inj, taps=dict(plan.taps.get(t, {})),
                        closed=plan.topology[t])


def _worst_excess(network, state, tol):
    report = sweep.violation_report(network, state, tol=tol)
    return report[0].excess if report else 0.0


def delivered_output(network, scenario, plan, t, gen_mult):
    """Total DG active power of a plan at `t` under generation multipliers."""
    total = 0.0
    for i, site in network.dg_sites.items():
        for ph in site.phases:
            total += (scenario.eta(i, ph, t) * gen_mult.get(i, 1.0)
                      * plan.y.get((i, ph), 0.0))
    return total


def evaluate_sample(network, scenario, plan, t, gen_mult, load_mult,
                    tol=sweep.DEFAULT_VIOLATION_TOL):
    """Replay one scenario exactly; shed all DG on a voltage violation.

    Returns (delivered power, violated, diverged, bound excess).  The excess
    is measured with the DG connected; shedding is the protection response,
    so a shed sample delivers zero and still counts as a violation.  The
    default tolerance is the shared model-error allowance used when judging
    replayed optimization results.
    """
    inj = _deployed_injections(network, scenario, plan, t, gen_mult, load_mult)
    try:
        state = sweep.solve(network, inj)
    except sweep.SweepError:
        return 0.0, False, True, math.inf
    excess = _worst_excess(network, state, tol)
    if excess > 0.0:
        return 0.0, True, False, excess
    return delivered_output(network, scenario, plan, t, gen_mult), False, False, excess


def monte_carlo(network, scenario, plan, n=10000, t=13, dev_dg=0.2,
                dev_load=0.15, seed=0):
    """Monte Carlo replay of a deployed plan at one period."""
    gen, load = sample_multipliers(network, n, dev_dg, dev_load, seed)
    served = []
    violations = diverged = 0
    total = 0.0
    worst_excess = 0.0
    for s in range(n):
        gm = {i: mult[s] for i, mult in gen.items()}
        lm = {i: mult[s] for i, mult in load.items()}
        out, bad, div, excess = evaluate_sample(network, scenario, plan, t, gm, lm)
        total += out
        if bad:
            violations += 1
        elif div:
            diverged += 1
        else:
            served.append(out)
        if math.isfinite(excess):
            worst_excess = max(worst_excess, excess)
    avg_served = float(np.mean(served)) if served else math.nan
    return McResult(n=n, period=t, violations=violations, diverged=diverged,
                    avg_output=total / n, avg_output_served=avg_served,
                    max_excess=worst_excess)


def worst_case_output(network, scenario, plan, realization, t):
    """Delivered power at `t` under a worst-case realization, with shedding."""
    gen = {i: realization.eta_factor(scenario, i, t) for i in network.dg_sites}
    load = {i: realization.load_factor(scenario, i, t) for i in network.buses}
    return evaluate_sample(network, scenario, plan, t, gen, load)


@dataclass(frozen=True)
class MethodRun:
    """One assessment method's plan and evaluation artifacts."""

    name: str
    refined: object               # deployed plan (capacities + schedules)
    capacity: float
    worst_output: float           # delivered power in the worst case (shed -> 0)
    mc: McResult | None = None
    trace: object | None = None


def _method_options(name):
    if name == "M-1":
        return AnmOptions(), "deterministic"
    if name == "M-2":
        return AnmOptions(enable_reconfig=False), "robust"
    if name == "RC-CAM":
        return AnmOptions(), "robust"
    raise milp.ConfigError(f"unknown method {name!r}")


def compare_methods(network, scenario, t=13, mc_samples=10000, seed=0,
                    ccg=None, methods=("RC-CAM", "M-1", "M-2"),
                    deviations=((0.2, 0.15),)):
    """Three-method comparison: capacities, worst-case outputs, Monte Carlo.

    The worst-case realizations are the ones the robust full-control run
    enumerates; every method's plan is replayed under them and through the
    Monte Carlo sampler at the same deviations and seed.
    """
    cases = []
    for dev_dg, dev_load in deviations:
        scen = scenario.with_deviations(dev_dg=dev_dg, dev_load=dev_load)
        runs = {}
        worst_reals = None
        for name in methods:
            opts, mode = _method_options(name)
            res = three_step(network, scen, opts=opts, mode=mode, ccg=ccg)
            if name == "RC-CAM":
                worst_reals = [r for r in res.scenarios if r.active()]
            runs[name] = res
        if not worst_reals:
            worst_reals = []
        rows = []
        for name in methods:
            res = runs[name]
            outs = [worst_case_output(network, scen, res.refined, real, t)[0]
                    for real in worst_reals]
            worst_out = min(outs) if outs else math.nan
            mc = monte_carlo(network, scen, res.refined, n=mc_samples, t=t,
                             dev_dg=dev_dg, dev_load=dev_load, seed=seed)
            rows.append(MethodRun(name=name, refined=res.refined,
                                  capacity=res.capacity_refined,
                                  worst_output=worst_out, mc=mc,
                                  trace=res.trace))
        cases.append(((dev_dg, dev_load), rows))
    return cases


def budget_sweep(network, scenario, budgets=(0, 1, 2, 3, 4), ccg=None,
                 opts=None):
    """Robust capacity (level-1 certified) across uniform deviation budgets."""
    rows = []
    for b in budgets:
        scen = scenario.with_budget(int(b))
        out = ccg_solve(network, scen, opts=opts, ccg=ccg)
        worst = next((r for r in reversed(out.worst_cases) if r.active()), None)
        rows.append((int(b), out.result.objective, out.trace.converged,
                     sorted(worst.active()) if worst else []))
    return rows


# ---------------------------------------------------------------------------
# report writers


def _fmt(x, nd=4):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "-"
    return f"{x:.{nd}f}"


def write_compare_report(cases, out):
    w = out.write
    for (dev_dg, dev_load), rows in cases:
        w(f"deviation case: dev_dg={dev_dg:g} dev_load={dev_load:g}\n")
        w(f"{'method':<8} {'capacity':>10} {'worst out':>10} "
          f"{'mc avg out':>11} {'violation':>10}\n")
        for run in rows:
            rate = run.mc.violation_rate if run.mc else math.nan
            w(f"{run.name:<8} {_fmt(run.capacity):>10} "
              f"{_fmt(run.worst_output):>10} "
              f"{_fmt(run.mc.avg_output if run.mc else None):>11} "
              f"{rate:>9.2%}\n")
        w("\n")


def write_compare_csv(cases, path):
    with open(path, "w", newline="") as fh:
        cw = csv.writer(fh)
        cw.writerow(["dev_dg", "dev_load", "method", "capacity",
                     "worst_output", "mc_avg_output", "mc_violation_rate",
                     "mc_violations", "mc_diverged", "mc_samples"])
        for (dev_dg, dev_load), rows in cases:
            for run in rows:
                cw.writerow([dev_dg, dev_load, run.name,
                             f"{run.capacity:.6f}",
                             f"{run.worst_output:.6f}",
                             f"{run.mc.avg_output:.6f}",
                             f"{run.mc.violation_rate:.6f}",
                             run.mc.violations, run.mc.diverged, run.mc.n])


def write_budget_report(rows, out):
    out.write(f"{'budget':>6} {'capacity':>10} {'converged':>10}  worst case\n")
    for b, cap, conv, worst in rows:
        out.write(f"{b:>6} {cap:>10.4f} {str(conv):>10}  "
                  f"{','.join(worst) if worst else '(nominal)'}\n")


def write_budget_csv(rows, path):
    with open(path, "w", newline="") as fh:
        cw = csv.writer(fh)
        cw.writerow(["budget", "capacity", "converged", "worst_case"])
        for b, cap, conv, worst in rows:
            cw.writerow([b, f"{cap:.6f}", conv, ";".join(worst)])


# ---------------------------------------------------------------------------
# command-line interface


def _add_instance_arg(p):
    p.add_argument("--instance", required=True,
                   help="path to a network instance (json)")


def _anm_from_args(args):
    kinds = set((args.anm or "all").split(","))
    if "all" in kinds:
        return AnmOptions()
    return AnmOptions(enable_reconfig="reconfig" in kinds,
                      enable_oltc="oltc" in kinds,
                      enable_var="var" in kinds,
                      enable_dg_q="dgq" in kinds)


def _ccg_from_args(args):
    params = milp.SolveParams(
        time_limit=args.time_limit, heuristic_effort=args.heuristic_effort,
        mip_gap=args.mip_gap)
    return CcgOptions(gamma=args.gamma, max_iter=args.max_iter, params=params,
                      sub_params=replace(params, time_limit=args.sub_time_limit)
                      if args.sub_time_limit else None)


def _scenario_from_args(instance, args):
    scen = instance.scenario
    if args.periods:
        scen = scen.with_periods(int(t) for t in args.periods.split(","))
    if args.dev_dg is not None or args.dev_load is not None:
        scen = scen.with_deviations(dev_dg=args.dev_dg, dev_load=args.dev_load)
    if args.budget is not None:
        scen = scen.with_budget(None if args.budget == "unbounded"
                                else int(args.budget))
    return scen


def _out_stream(args):
    return open(args.out, "w") if args.out else sys.stdout


def cmd_assess(args):
    inst = load_instance(args.instance)
    scen = _scenario_from_args(inst, args)
    opts = _anm_from_args(args)
    ccg = _ccg_from_args(args)
    refined = None
    trace = None
    reals = []
    if args.refine:
        res = three_step(inst.network, scen, opts=opts, mode=args.mode,
                         ccg=ccg, params=ccg.params)
        result, refined, trace = res.base, res.refined, res.trace
        reals = res.scenarios
    elif args.mode == "deterministic":
        result = assess_deterministic(inst.network, scen, opts=opts,
                                      params=ccg.params, dump_lp=args.dump_lp)
    else:
        out = ccg_solve(inst.network, scen, opts=opts, ccg=ccg)
        result, trace, reals = out.result, out.trace, out.worst_cases
    with _out_stream(args) as out_fh:
        _write_assessment(out_fh, inst.network, result, refined, trace,
                          reals, args)
    return 0


def _write_assessment(out, network, result, refined, trace, reals, args):
    w = out.write
    w(f"mode: {args.mode}\n")
    w(f"capacity (level-1): {result.objective:.6f} pu  [{result.status}]\n")
    if result.bound is not None:
        w(f"solver bound: {result.bound:.6f}\n")
    if refined is not None:
        w(f"capacity (refined): {refined.objective:.6f} pu\n")
    final = refined if refined is not None else result
    w("per-site capacity (pu):\n")
    for (i, ph), val in sorted(final.y.items()):
        w(f"  node {i} phase {ph}: {val:.6f}\n")
    all_branches = frozenset(network.branches)
    by_open = {}
    for t in sorted(final.topology):
        open_ids = tuple(sorted(all_branches - final.topology[t]))
        by_open.setdefault(open_ids, []).append(t)
    for open_ids, periods in by_open.items():
        span = (f"t{periods[0]}" if len(periods) == 1
                else f"t{periods[0]}-t{periods[-1]}")
        w(f"open branches {span}: {','.join(open_ids) or '(none)'}\n")
    if trace is not None:
        w(f"iterations: {len(trace.iterations)} converged: {trace.converged}\n")
        if trace.message:
            w(f"note: {trace.message}\n")
        if args.trace:
            for it in trace.iterations:
                w(f"  k={it.k} lower={_fmt(it.lower, 6)} "
                  f"upper={_fmt(it.upper, 6)} cut={_fmt(it.cut_value, 6)} "
                  f"audit={it.audit_gap:.2e} "
                  f"worst={','.join(it.worst.active()) or 'nominal'}\n")
    if reals and args.trace:
        w("enumerated worst cases:\n")
        for real in reals:
            w(f"  {real.label}: {','.join(real.active()) or 'nominal'}\n")


def cmd_powerflow(args):
    inst = load_instance(args.instance)
    scen = _scenario_from_args(inst, args)
    t = scen.periods[0]
    s_inj = {}
    for i, bus in inst.network.buses.items():
        for ph in bus.phases:
            dem = predicted_load(inst.network, scen, i, ph, t)
            if dem:
                s_inj.setdefault(i, {})[ph] = -dem
    state = sweep.solve(inst.network, InjectionSet(s_inj=s_inj))
    with _out_stream(args) as out:
        out.write(f"period {t}: converged in {state.iterations} iterations, "
                  f"mismatch {state.max_mismatch:.3e}\n")
        for i in sorted(inst.network.buses):
            parts = [f"{ph}={abs(v):.6f}" for ph, v in sorted(state.v[i].items())]
            out.write(f"bus {i}: " + " ".join(parts) + "\n")
    return 0


def cmd_lbpf_bench(args):
    inst = load_instance(args.instance)
    scen = _scenario_from_args(inst, args)
    t = scen.periods[0]
    net = inst.network
    scales = [float(s) for s in (args.scales or "0.2,0.6,1.0,1.5").split(",")]
    rows = []
    for scale in scales:
        s_inj = {}
        for i, bus in net.buses.items():
            for ph in bus.phases:
                dem = predicted_load(net, scen, i, ph, t) * scale
                if dem:
                    s_inj.setdefault(i, {})[ph] = -dem
        inj = InjectionSet(s_inj=s_inj)
        exact = sweep.solve(net, inj)
        lin1 = linear_solve(net, lbpf1_coeffs(net), inj)
        op = OperatingPoint.from_state(net, exact)
        lin2 = linear_solve(net, build_lbpf2(net, op), inj)
        err1 = err2 = 0.0
        for i, bus in net.buses.items():
            for ph in bus.phases:
                u = exact.u(i, ph)
                err1 = max(err1, abs(math.sqrt(max(lin1.u[i][ph], 0.0)) - math.sqrt(u)))
                err2 = max(err2, abs(math.sqrt(max(lin2.u[i][ph], 0.0)) - math.sqrt(u)))
        loss = exact.total_loss().real
        rows.append((scale, err1, err2, loss,
                     lin1.total_loss(lbpf1_coeffs(net)).real,
                     lin2.total_loss(build_lbpf2(net, op)).real))
    with _out_stream(args) as out:
        out.write(f"{'scale':>6} {'v err lossless':>15} {'v err anchored':>15} "
                  f"{'exact loss':>11} {'loss l1':>8} {'loss l2':>8}\n")
        for scale, e1, e2, pl, l1, l2 in rows:
            out.write(f"{scale:>6.2f} {e1:>15.3e} {e2:>15.3e} "
                      f"{pl:>11.6f} {l1:>8.4f} {l2:>8.4f}\n")
    return 0


def cmd_montecarlo(args):
    inst = load_instance(args.instance)
    scen = _scenario_from_args(inst, args)
    opts = _anm_from_args(args)
    ccg = _ccg_from_args(args)
    res = three_step(inst.network, scen, opts=opts, mode=args.mode, ccg=ccg)
    plan = res.refined if args.op_point == "refined" else res.base
    mc = monte_carlo(inst.network, scen, plan, n=args.samples, t=args.period,
                     dev_dg=scen.dev_dg, dev_load=scen.dev_load,
                     seed=args.seed)
    with _out_stream(args) as out:
        out.write(f"samples: {mc.n} period: {mc.period}\n")
        out.write(f"capacity deployed: {plan.objective:.6f} pu\n")
        out.write(f"violations: {mc.violations} diverged: {mc.diverged} "
                  f"rate: {mc.violation_rate:.4%}\n")
        out.write(f"average output: {mc.avg_output:.6f} pu\n")
        out.write(f"average output (served): {_fmt(mc.avg_output_served, 6)} pu\n")
        out.write(f"max bound excess: {mc.max_excess:.3e} pu^2\n")
    return 0


def cmd_budget_sweep(args):
    inst = load_instance(args.instance)
    scen = _scenario_from_args(inst, args)
    rows = budget_sweep(inst.network, scen,
                        budgets=[int(b) for b in args.budgets.split(",")],
                        ccg=_ccg_from_args(args), opts=_anm_from_args(args))
    with _out_stream(args) as out:
        write_budget_report(rows, out)
    if args.csv:
        write_budget_csv(rows, args.csv)
    return 0


def cmd_compare(args):
    inst = load_instance(args.instance)
    scen = _scenario_from_args(inst, args)
    deviations = []
    for part in (args.deviations or "0.2:0.15").split(","):
        dg, ld = part.split(":")
        deviations.append((float(dg), float(ld)))
    cases = compare_methods(inst.network, scen, t=args.period,
                            mc_samples=args.samples, seed=args.seed,
                            ccg=_ccg_from_args(args),
                            deviations=tuple(deviations))
    with _out_stream(args) as out:
        write_compare_report(cases, out)
    if args.csv:
        write_compare_csv(cases, args.csv)
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="hostcap",
        description="DG hosting-capacity assessment on unbalanced feeders")
    sub = p.add_subparsers(dest="command", required=True)

    def common(q, periods=True):
        _add_instance_arg(q)
        q.add_argument("--out", help="write the report here instead of stdout")
        if periods:
            q.add_argument("--periods", help="comma-separated period subset")
        q.add_argument("--dev-dg", type=float, default=None)
        q.add_argument("--dev-load", type=float, default=None)
        q.add_argument("--budget", default=None,
                       help="uniform per-period budget, or 'unbounded'")

    def solver(q):
        q.add_argument("--gamma", type=float, default=1e-4)
        q.add_argument("--max-iter", type=int, default=20)
        q.add_argument("--mip-gap", type=float, default=1e-6)
        q.add_argument("--time-limit", type=float, default=None)
        q.add_argument("--sub-time-limit", type=float, default=None)
        q.add_argument("--heuristic-effort", type=float, default=None)
        q.add_argument("--anm", default="all",
                       help="all or comma set of reconfig,oltc,var,dgq")

    q = sub.add_parser("assess", help="hosting-capacity assessment")
    common(q)
    solver(q)
    q.add_argument("--mode", choices=("deterministic", "robust"),
                   default="deterministic")
    q.add_argument("--refine", action="store_true",
                   help="apply the anchored-model refinement")
    q.add_argument("--trace", action="store_true")
    q.add_argument("--dump-lp", help="write the level-1 model as an LP file")
    q.set_defaults(func=cmd_assess)

    q = sub.add_parser("powerflow", help="exact nominal power flow")
    common(q)
    q.set_defaults(func=cmd_powerflow)

    q = sub.add_parser("lbpf-bench", help="linear model accuracy benchmark")
    common(q)
    q.add_argument("--scales", help="comma-separated loading scales")
    q.set_defaults(func=cmd_lbpf_bench)

    q = sub.add_parser("montecarlo", help="Monte Carlo replay of a plan")
    common(q)
    solver(q)
    q.add_argument("--mode", choices=("deterministic", "robust"),
                   default="robust")
    q.add_argument("--op-point", choices=("refined", "base"),
                   default="refined")
    q.add_argument("-n", "--samples", type=int, default=10000)
    q.add_argument("--period", type=int, default=13)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_montecarlo)

    q = sub.add_parser("budget-sweep", help="capacity vs deviation budget")
    common(q)
    solver(q)
    q.add_argument("--budgets", default="0,1,2,3,4")
    q.add_argument("--csv", help="also write a csv table")
    q.set_defaults(func=cmd_budget_sweep)

    q = sub.add_parser("compare", help="three-method comparison study")
    common(q)
    solver(q)
    q.add_argument("--deviations", help="cases as dg:load pairs, e.g. 0.2:0.15,0.15:0.1")
    q.add_argument("-n", "--samples", type=int, default=10000)
    q.add_argument("--period", type=int, default=13)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--csv", help="also write a csv table")
    q.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, ModelError, milp.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (milp.SolverError, sweep.SweepError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
