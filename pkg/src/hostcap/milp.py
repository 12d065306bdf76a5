"""Mixed-integer linear model container and solver backends.

Models are built against variable names; the container keeps a sparse row
list, converts to the backend's form once, and can round-trip itself through
CPLEX-style LP text.  The default backend is HiGHS via scipy.optimize.milp;
others can be registered and selected with the HOSTCAP_SOLVER environment
variable.

Two small modelling devices used throughout the package live here as well:
the big-M linearization of a binary times bounded-continuous product, and
binary expansion of a bounded integer with an explicit cap row.
"""

from __future__ import annotations

import math
import os
import re
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import Bounds, LinearConstraint, milp


class ConfigError(ValueError):
    pass


class SolverError(RuntimeError):
    pass


class SolverStatus:
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    LIMIT = "limit"
    ERROR = "error"


@dataclass
class SolveParams:
    mip_gap: float = 1e-6
    time_limit: float | None = None
    heuristic_effort: float | None = None
    verbose: bool = False


@dataclass
class SolveResult:
    status: str
    objective: float | None
    values: np.ndarray | None
    model: "MilpModel"
    gap: float | None = None
    bound: float | None = None
    message: str = ""
    runtime: float = 0.0

    @property
    def ok(self):
        return self.status == SolverStatus.OPTIMAL

    def value(self, name):
        return float(self.values[self.model.var_index[name]])

    def value_map(self, names):
        return {n: self.value(n) for n in names}


@dataclass
class Row:
    coeffs: dict          # var index -> coefficient
    sense: str            # "<=", ">=", "=="
    rhs: float
    name: str


class MilpModel:
    def __init__(self, name="model", sense="max"):
        if sense not in ("max", "min"):
            raise ConfigError("sense must be 'max' or 'min'")
        self.name = name
        self.sense = sense
        self.var_names = []
        self.var_index = {}
        self.lb = []
        self.ub = []
        self.kind = []        # "C" | "I" | "B"
        self.rows = []
        self.obj = {}         # var index -> coefficient
        self.obj_const = 0.0

    # -- construction -------------------------------------------------------

    def add_var(self, name, lb=0.0, ub=math.inf, kind="C"):
        if name in self.var_index:
            raise ConfigError(f"duplicate variable {name!r}")
        if kind not in ("C", "I", "B"):
            raise ConfigError(f"bad kind {kind!r} for {name!r}")
        if kind == "B":
            lb, ub = max(lb, 0.0), min(ub, 1.0)
        if lb > ub:
            raise ConfigError(f"empty bounds for {name!r}: [{lb}, {ub}]")
        idx = len(self.var_names)
        self.var_index[name] = idx
        self.var_names.append(name)
        self.lb.append(float(lb))
        self.ub.append(float(ub))
        self.kind.append(kind)
        return name

    def _resolve(self, coeffs):
        out = {}
        for key, val in coeffs.items():
            idx = self.var_index[key] if isinstance(key, str) else key
            if val:
                out[idx] = out.get(idx, 0.0) + float(val)
        return out

    def add_constr(self, coeffs, sense, rhs, name=None):
        if sense not in ("<=", ">=", "=="):
            raise ConfigError(f"bad sense {sense!r}")
        if name is None:
            name = f"c{len(self.rows)}"
        self.rows.append(Row(self._resolve(coeffs), sense, float(rhs), name))
        return name

    def set_objective(self, coeffs, const=0.0):
        self.obj = self._resolve(coeffs)
        self.obj_const = float(const)

    def add_objective_term(self, name, coef):
        idx = self.var_index[name]
        self.obj[idx] = self.obj.get(idx, 0.0) + float(coef)

    def bounds_of(self, name):
        idx = self.var_index[name]
        return self.lb[idx], self.ub[idx]

    def set_bounds(self, name, lb=None, ub=None):
        idx = self.var_index[name]
        if lb is not None:
            self.lb[idx] = float(lb)
        if ub is not None:
            self.ub[idx] = float(ub)
        if self.lb[idx] > self.ub[idx]:
            raise ConfigError(f"empty bounds for {name!r}")

    @property
    def n_vars(self):
        return len(self.var_names)

    # -- evaluation ---------------------------------------------------------

    def objective_value(self, values):
        tot = self.obj_const
        for idx, coef in self.obj.items():
            tot += coef * values[idx]
        return tot

    def check(self, values, tol=1e-6):
        """Worst violation of rows, bounds, and integrality at given values."""
        worst, where = 0.0, ""
        for j in range(self.n_vars):
            v = values[j]
            gap = max(self.lb[j] - v, v - self.ub[j], 0.0)
            if gap > worst:
                worst, where = gap, f"bound {self.var_names[j]}"
            if self.kind[j] in ("I", "B"):
                gap = abs(v - round(v))
                if gap > worst:
                    worst, where = gap, f"integrality {self.var_names[j]}"
        for row in self.rows:
            lhs = sum(coef * values[idx] for idx, coef in row.coeffs.items())
            if row.sense == "<=":
                gap = lhs - row.rhs
            elif row.sense == ">=":
                gap = row.rhs - lhs
            else:
                gap = abs(lhs - row.rhs)
            if gap > worst:
                worst, where = gap, f"row {row.name}"
        return worst, where

    # -- solving ------------------------------------------------------------

    def solve(self, params=None, backend=None):
        return solve(self, backend=backend, params=params)


def _scipy_solve(model, params):
    n = model.n_vars
    c = np.zeros(n)
    for idx, coef in model.obj.items():
        c[idx] = coef
    sign = -1.0 if model.sense == "max" else 1.0

    constraints = []
    if model.rows:
        rows_i, cols, vals = [], [], []
        lo = np.empty(len(model.rows))
        hi = np.empty(len(model.rows))
        for r, row in enumerate(model.rows):
            for idx, coef in row.coeffs.items():
                rows_i.append(r)
                cols.append(idx)
                vals.append(coef)
            if row.sense == "<=":
                lo[r], hi[r] = -np.inf, row.rhs
            elif row.sense == ">=":
                lo[r], hi[r] = row.rhs, np.inf
            else:
                lo[r] = hi[r] = row.rhs
        amat = sp.csr_matrix((vals, (rows_i, cols)), shape=(len(model.rows), n))
        constraints.append(LinearConstraint(amat, lo, hi))

    integrality = np.array([0 if k == "C" else 1 for k in model.kind])
    options = {"mip_rel_gap": params.mip_gap, "disp": params.verbose}
    if params.time_limit is not None:
        options["time_limit"] = params.time_limit
    if params.heuristic_effort is not None:
        # forwarded verbatim to HiGHS; scipy flags it as unrecognized
        options["mip_heuristic_effort"] = params.heuristic_effort
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="Unrecognized options",
                                category=RuntimeWarning)
        res = milp(c=sign * c, constraints=constraints,
                   integrality=integrality,
                   bounds=Bounds(np.array(model.lb), np.array(model.ub)),
                   options=options)
    rt = time.perf_counter() - t0

    status = {0: SolverStatus.OPTIMAL, 1: SolverStatus.LIMIT,
              2: SolverStatus.INFEASIBLE, 3: SolverStatus.UNBOUNDED}.get(
                  res.status, SolverStatus.ERROR)
    values = None if res.x is None else np.asarray(res.x)
    objective = None
    if values is not None:
        objective = model.objective_value(values)
    gap = getattr(res, "mip_gap", None)
    bound = getattr(res, "mip_dual_bound", None)
    if bound is not None:
        bound = sign * float(bound) + model.obj_const
    return SolveResult(status=status, objective=objective, values=values,
                       model=model, gap=gap, bound=bound,
                       message=res.message, runtime=rt)


_BACKENDS = {"scipy": _scipy_solve}


def register_backend(name, fn):
    _BACKENDS[name] = fn


def solve(model, backend=None, params=None):
    """Solve a model; backend falls back to $HOSTCAP_SOLVER, then scipy."""
    params = params or SolveParams()
    name = backend or os.environ.get("HOSTCAP_SOLVER", "scipy")
    if name not in _BACKENDS:
        raise ConfigError(f"unknown solver backend {name!r}; "
                          f"available: {sorted(_BACKENDS)}")
    return _BACKENDS[name](model, params)


# -- modelling devices ------------------------------------------------------

def big_m_product(model, binary, cont, m0, name=None):
    """Auxiliary variable equal to binary * cont, for cont within [0, m0].

    Adds theta with theta <= m0 b, theta <= x, theta >= x - m0 (1 - b),
    theta >= 0.  The continuous variable's declared bounds must already lie
    inside [0, m0]; anything else makes the relaxation wrong, so it is
    rejected here.
    """
    lb, ub = model.bounds_of(cont)
    if lb < 0 or ub > m0:
        raise ConfigError(
            f"big_m_product({binary}, {cont}): bounds [{lb}, {ub}] not within [0, {m0}]")
    if model.kind[model.var_index[binary]] != "B":
        raise ConfigError(f"big_m_product: {binary!r} is not binary")
    theta = name or f"prod({binary},{cont})"
    model.add_var(theta, lb=0.0, ub=m0)
    model.add_constr({theta: 1.0, binary: -m0}, "<=", 0.0, f"{theta}/cap")
    model.add_constr({theta: 1.0, cont: -1.0}, "<=", 0.0, f"{theta}/le_x")
    model.add_constr({cont: 1.0, theta: -1.0, binary: m0}, "<=", m0, f"{theta}/ge_x")
    return theta


@dataclass(frozen=True)
class BitExpansion:
    bits: tuple           # variable names, least significant first
    weights: tuple
    cap: int

    def expr(self, scale=1.0):
        return {b: scale * w for b, w in zip(self.bits, self.weights)}

    def value(self, result):
        return round(sum(w * result.value(b) for b, w in zip(self.bits, self.weights)))


def binary_expand(model, cap, name):
    """Bits lambda_n with sum 2^n lambda_n in 0..cap, cap row included."""
    if cap < 1:
        raise ConfigError("binary_expand needs cap >= 1")
    n_bits = max(1, math.ceil(math.log2(cap + 1)))
    bits, weights = [], []
    for nbit in range(n_bits):
        bits.append(model.add_var(f"{name}.b{nbit}", kind="B"))
        weights.append(2 ** nbit)
    exp = BitExpansion(bits=tuple(bits), weights=tuple(weights), cap=cap)
    model.add_constr(exp.expr(), "<=", cap, f"{name}.cap")
    return exp


# -- LP text round trip -----------------------------------------------------

_LP_BAD = re.compile(r"[^A-Za-z0-9!#$%&()/,.;?@_'{}|~]")


def _lp_name(name):
    out = name.replace("[", "(").replace("]", ")")
    out = _LP_BAD.sub("_", out)
    if not out or out[0].isdigit() or out[0] == ".":
        out = "v_" + out
    return out


def _lp_num(x):
    if x == math.inf:
        return "inf"
    if x == -math.inf:
        return "-inf"
    return repr(float(x))


def write_lp(model, path=None):
    """Model as CPLEX-style LP text; returns the text, writes it if path given."""
    names = {}
    used = {}
    for vn in model.var_names:
        base = _lp_name(vn)
        if base in used:
            used[base] += 1
            base = f"{base}#{used[base]}"
        used.setdefault(base, 0)
        names[vn] = base

    def term_str(coeffs):
        parts = []
        for idx in sorted(coeffs):
            coef = coeffs[idx]
            tag = names[model.var_names[idx]]
            sign = "+" if coef >= 0 else "-"
            parts.append(f"{sign} {_lp_num(abs(coef))} {tag}")
        return " ".join(parts) if parts else "+ 0 " + names[model.var_names[0]]

    lines = ["\\ " + model.name,
             "Maximize" if model.sense == "max" else "Minimize"]
    obj = term_str(model.obj)
    if model.obj_const:
        sign = "+" if model.obj_const >= 0 else "-"
        obj += f" {sign} {_lp_num(abs(model.obj_const))}"
    lines.append(" obj: " + obj)
    lines.append("Subject To")
    sense_txt = {"<=": "<=", ">=": ">=", "==": "="}
    for k, row in enumerate(model.rows):
        lines.append(f" r{k}: {term_str(row.coeffs)} {sense_txt[row.sense]} {_lp_num(row.rhs)}")
    lines.append("Bounds")
    for j, vn in enumerate(model.var_names):
        if model.kind[j] == "B":
            continue
        lo, hi = model.lb[j], model.ub[j]
        lines.append(f" {_lp_num(lo)} <= {names[vn]} <= {_lp_num(hi)}")
    gen = [names[vn] for j, vn in enumerate(model.var_names) if model.kind[j] == "I"]
    if gen:
        lines.append("Generals")
        lines.append(" " + " ".join(gen))
    binv = [names[vn] for j, vn in enumerate(model.var_names) if model.kind[j] == "B"]
    if binv:
        lines.append("Binaries")
        lines.append(" " + " ".join(binv))
    lines.append("End")
    text = "\n".join(lines) + "\n"
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    return text


_NAME_RE = r"[A-Za-z!#$%&(/,.;?@_'{}|~][A-Za-z0-9!#$%&()/,.;?@_'{}|~#]*"
_TOKEN_RE = re.compile(
    rf"(?P<name>{_NAME_RE})|(?P<num>[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?|[+-]?inf)"
    r"|(?P<sense><=|>=|=)|(?P<sign>[+-])|(?P<colon>:)")


def read_lp(text):
    """Parse LP text produced by write_lp back into a MilpModel."""
    lines = []
    for ln in text.splitlines():
        ln = ln.split("\\")[0].strip()
        if ln:
            lines.append(ln)

    def section_of(ln):
        key = ln.lower()
        for tag, sec in (("maximize", "obj-max"), ("minimize", "obj-min"),
                         ("subject to", "rows"), ("st", "rows"),
                         ("bounds", "bounds"), ("generals", "gen"),
                         ("general", "gen"), ("binaries", "bin"),
                         ("binary", "bin"), ("end", "end")):
            if key == tag:
                return sec
        return None

    model = MilpModel(name="lp", sense="max")
    seen = {}

    def var(tag):
        # LP-format default bounds; explicit Bounds lines override
        if tag not in seen:
            seen[tag] = model.add_var(tag, lb=0.0, ub=math.inf)
        return tag

    section = None
    obj_tokens = []
    row_chunks = []
    bound_lines = []
    kinds = {}
    for ln in lines:
        sec = section_of(ln)
        if sec:
            section = sec
            if sec == "obj-max":
                model.sense = "max"
            elif sec == "obj-min":
                model.sense = "min"
            continue
        if section in ("obj-max", "obj-min"):
            obj_tokens.append(ln)
        elif section == "rows":
            row_chunks.append(ln)
        elif section == "bounds":
            bound_lines.append(ln)
        elif section in ("gen", "bin"):
            for tag in ln.split():
                kinds[tag] = "I" if section == "gen" else "B"

    def tokenize(chunk):
        out = []
        for m in _TOKEN_RE.finditer(chunk):
            kind = m.lastgroup
            out.append((kind, m.group()))
        return out

    def parse_expr(tokens):
        """tokens of `[name:] terms [sense rhs]` -> (label, coeffs, sense, rhs, const)"""
        label = None
        if len(tokens) >= 2 and tokens[0][0] == "name" and tokens[1][0] == "colon":
            label = tokens[0][1]
            tokens = tokens[2:]
        coeffs = {}
        const = 0.0
        sense = None
        rhs = None
        sign = 1.0
        pending = None
        i = 0
        while i < len(tokens):
            kind, tok = tokens[i]
            if kind == "sense":
                sense = "==" if tok == "=" else tok
                kind2, tok2 = tokens[i + 1]
                mult = 1.0
                if kind2 == "sign":
                    mult = -1.0 if tok2 == "-" else 1.0
                    kind2, tok2 = tokens[i + 2]
                rhs = mult * float(tok2)
                break
            if kind == "sign":
                sign = -1.0 if tok == "-" else 1.0
                pending = None
            elif kind == "num":
                val = float(tok)
                if pending is not None:
                    const += sign * pending
                pending = val
            elif kind == "name":
                coef = pending if pending is not None else 1.0
                coeffs[var(tok)] = coeffs.get(tok, 0.0) + sign * coef
                pending = None
                sign = 1.0
            i += 1
        if pending is not None:
            const += sign * pending
        return label, coeffs, sense, rhs, const

    _, obj, _, _, const = parse_expr(tokenize(" ".join(obj_tokens)))
    # merge continuation lines: a row ends where a sense token appeared
    merged, buf = [], ""
    for chunk in row_chunks:
        buf = (buf + " " + chunk).strip()
        if re.search(r"(<=|>=|=)\s*[+-]?(\d|\.|inf)", buf):
            merged.append(buf)
            buf = ""
    if buf:
        merged.append(buf)
    rows = []
    for chunk in merged:
        label, coeffs, sense, rhs, cst = parse_expr(tokenize(chunk))
        if sense is None:
            raise ConfigError(f"constraint without sense: {chunk!r}")
        rows.append((label, coeffs, sense, rhs - cst))

    num_pat = r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?|[+-]?inf"

    def to_f(tok):
        tok = tok.strip()
        if tok.endswith("inf"):
            return -math.inf if tok.startswith("-") else math.inf
        return float(tok)

    for ln in bound_lines:
        m = re.fullmatch(rf"({num_pat})\s*<=\s*({_NAME_RE})\s*<=\s*({num_pat})", ln)
        if m:
            model.set_bounds(var(m.group(2)), lb=to_f(m.group(1)), ub=to_f(m.group(3)))
            continue
        m = re.fullmatch(rf"({_NAME_RE})\s*(<=|>=|=)\s*({num_pat})", ln)
        if m:
            name, sense, val = var(m.group(1)), m.group(2), to_f(m.group(3))
            if sense == "<=":
                model.set_bounds(name, ub=val)
            elif sense == ">=":
                model.set_bounds(name, lb=val)
            else:
                model.set_bounds(name, lb=val, ub=val)
            continue
        m = re.fullmatch(rf"({_NAME_RE})\s+free", ln, flags=re.IGNORECASE)
        if m:
            model.set_bounds(var(m.group(1)), lb=-math.inf, ub=math.inf)

    for tag, kind in kinds.items():
        var(tag)
        idx = model.var_index[tag]
        model.kind[idx] = kind
        if kind == "B":
            model.lb[idx] = max(model.lb[idx], 0.0)
            model.ub[idx] = min(model.ub[idx], 1.0)

    for label, coeffs, sense, rhs in rows:
        model.add_constr(coeffs, sense, rhs, name=label)
    model.set_objective(obj, const=const)
    return model


def read_lp_file(path):
    with open(path) as fh:
        return read_lp(fh.read())
