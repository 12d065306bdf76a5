"""Network data model for unbalanced three-phase distribution feeders.

Everything downstream of this module works in per-unit.  The conversion
convention is:

* ``s_mva`` is the single-phase power base in MVA,
* ``v_kv`` is the line-to-line voltage base in kV,
* the phase voltage base is ``v_kv / sqrt(3)``,
* the impedance base is ``v_kv**2 / (3 * s_mva)`` in ohms.

Instance files store physical units (ohms, MW, MVar, kV); the loader
converts once.  Missing phases are explicit nulls in the file and simply
absent from the per-phase dicts in memory.
"""

from __future__ import annotations

import cmath
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

try:
    import jsonschema
except ImportError:  # pragma: no cover
    jsonschema = None

PHASES = ("A", "B", "C")
PHASE_INDEX = {p: i for i, p in enumerate(PHASES)}

# reference phasor angles for the root bus, radians
ROOT_ANGLES = {"A": 0.0, "B": -2.0 * math.pi / 3.0, "C": 2.0 * math.pi / 3.0}


class ParseError(ValueError):
    """Raised when an instance file is malformed or fails validation."""


class ModelError(ValueError):
    """Raised when model data is structurally inconsistent."""


def impedance_base_ohm(s_mva, v_kv):
    return v_kv ** 2 / (3.0 * s_mva)


def ohm_to_pu(z_ohm, s_mva, v_kv):
    return np.asarray(z_ohm) / impedance_base_ohm(s_mva, v_kv)


def pu_to_ohm(z_pu, s_mva, v_kv):
    return np.asarray(z_pu) * impedance_base_ohm(s_mva, v_kv)


def mw_to_pu(p_mw, s_mva):
    return p_mw / s_mva


def pu_to_mw(p_pu, s_mva):
    return p_pu * s_mva


@dataclass(frozen=True)
class OltcParams:
    """On-load tap changer: ratio tau = tau_min + T * delta_tau, T in 0..tap_count."""

    tau_min: float
    delta_tau: float
    tap_count: int

    def __post_init__(self):
        if self.tap_count < 1:
            raise ModelError("tap_count must be >= 1")
        if self.delta_tau <= 0 or self.tau_min <= 0:
            raise ModelError("tau_min and delta_tau must be positive")

    @property
    def tau_max(self):
        return self.tau_min + self.tap_count * self.delta_tau

    def ratio(self, tap):
        if not 0 <= tap <= self.tap_count:
            raise ModelError(f"tap {tap} outside 0..{self.tap_count}")
        return self.tau_min + tap * self.delta_tau

    @property
    def neutral_tap(self):
        """Integer tap whose ratio is closest to 1.0 (ties toward the lower tap)."""
        taps = range(self.tap_count + 1)
        return min(taps, key=lambda t: (abs(self.ratio(t) - 1.0), t))


@dataclass(frozen=True)
class Bus:
    id: int
    phases: tuple
    load: dict = field(default_factory=dict)   # phase -> complex demand, pu
    u_min: dict = field(default_factory=dict)  # phase -> squared-voltage lower bound
    u_max: dict = field(default_factory=dict)
    is_root: bool = False

    def __post_init__(self):
        for ph in self.phases:
            if ph not in PHASES:
                raise ModelError(f"bus {self.id}: unknown phase {ph!r}")
        for ph in self.load:
            if ph not in self.phases:
                raise ModelError(f"bus {self.id}: load on missing phase {ph}")


@dataclass(frozen=True)
class Branch:
    id: str
    from_bus: int
    to_bus: int
    phases: tuple
    z: np.ndarray                 # full 3x3 complex impedance, pu; rows/cols of
                                  # missing phases are zero and never read
    s_max: dict = field(default_factory=dict)  # phase -> per-phase apparent cap, pu
    switchable: bool = True
    normally_open: bool = False
    transformer: OltcParams | None = None

    def z_self(self, phase):
        i = PHASE_INDEX[phase]
        return complex(self.z[i, i])

    def z_sub(self):
        """Impedance submatrix restricted to the branch's phases."""
        idx = [PHASE_INDEX[p] for p in self.phases]
        return self.z[np.ix_(idx, idx)]


@dataclass(frozen=True)
class DgSite:
    bus: int
    phases: tuple
    theta_min: float   # power-factor angle bounds, radians; q = tan(theta) * p
    theta_max: float
    y_max: dict = field(default_factory=dict)  # phase -> capacity cap, pu (may be inf)

    def __post_init__(self):
        if self.theta_min > self.theta_max:
            raise ModelError(f"dg at bus {self.bus}: theta_min > theta_max")


@dataclass(frozen=True)
class VarDevice:
    """Reactive power device: continuous (SVC) or discrete capacitor bank."""

    bus: int
    kind: str                     # "continuous" | "discrete"
    phases: tuple
    q_min: float = 0.0            # continuous: per-phase bounds, pu
    q_max: float = 0.0
    delta_q: float = 0.0          # discrete: per-step size, pu
    chi_max: int = 0              # discrete: number of steps

    def __post_init__(self):
        if self.kind not in ("continuous", "discrete"):
            raise ModelError(f"var device at bus {self.bus}: bad kind {self.kind!r}")
        if self.kind == "continuous" and self.q_min > self.q_max:
            raise ModelError(f"var device at bus {self.bus}: q_min > q_max")
        if self.kind == "discrete" and (self.delta_q < 0 or self.chi_max < 0):
            raise ModelError(f"var device at bus {self.bus}: bad step data")


@dataclass(frozen=True)
class ScenarioData:
    """Per-period forecast data and the uncertainty-set description.

    ``eta_hat[bus][phase]`` is a tuple of predicted DG efficiency per period.
    Deviation half-widths are relative: the admissible efficiency is
    ``eta_hat * (1 +- dev_dg)`` and the admissible demand ``load * (1 +- dev_load)``,
    with at most ``budget[t]`` deviation indicators active in period t
    (None = unbudgeted).
    """

    periods: tuple
    load_shape: tuple
    pv_shape: tuple
    eta_hat: dict
    dev_dg: float = 0.0
    dev_load: float = 0.0
    budget: dict = field(default_factory=dict)   # period -> int | None

    def eta(self, bus, phase, t):
        return self.eta_hat[bus][phase][t - 1]

    def budget_of(self, t):
        return self.budget.get(t)

    def with_deviations(self, dev_dg=None, dev_load=None):
        return replace(
            self,
            dev_dg=self.dev_dg if dev_dg is None else dev_dg,
            dev_load=self.dev_load if dev_load is None else dev_load,
        )

    def with_budget(self, budget):
        """Uniform budget for all periods; None lifts the budget."""
        return replace(self, budget={t: budget for t in self.periods})

    def with_periods(self, periods):
        return replace(self, periods=tuple(periods))


def predicted_load(network, scenario, bus_id, phase, t):
    """Forecast complex demand at (bus, phase, period), pu."""
    bus = network.buses[bus_id]
    base = bus.load.get(phase)
    if base is None:
        return 0j
    return base * scenario.load_shape[t - 1]


@dataclass(frozen=True)
class Network:
    name: str
    buses: dict
    branches: dict
    dg_sites: dict
    var_devices: tuple
    bases: tuple                  # (s_mva, v_kv)

    def __post_init__(self):
        ids = set(self.buses)
        roots = [b.id for b in self.buses.values() if b.is_root]
        if not roots:
            raise ModelError("network has no root bus")
        for br in self.branches.values():
            if br.from_bus not in ids or br.to_bus not in ids:
                raise ModelError(f"branch {br.id}: endpoint not a known bus")
            for ph in br.phases:
                if ph not in self.buses[br.from_bus].phases or ph not in self.buses[br.to_bus].phases:
                    raise ModelError(f"branch {br.id}: phase {ph} missing at an endpoint")
        for site in self.dg_sites.values():
            if site.bus not in ids:
                raise ModelError(f"dg site references unknown bus {site.bus}")
            for ph in site.phases:
                if ph not in self.buses[site.bus].phases:
                    raise ModelError(f"dg at bus {site.bus}: phase {ph} not present")
        for dev in self.var_devices:
            if dev.bus not in ids:
                raise ModelError(f"var device references unknown bus {dev.bus}")

    @property
    def roots(self):
        return tuple(b.id for b in self.buses.values() if b.is_root)

    @property
    def s_mva(self):
        return self.bases[0]

    @property
    def v_kv(self):
        return self.bases[1]

    def adjacency(self, closed):
        adj = {i: [] for i in self.buses}
        for bid in closed:
            br = self.branches[bid]
            adj[br.from_bus].append((br.to_bus, bid))
            adj[br.to_bus].append((br.from_bus, bid))
        return adj

    def root_voltage(self, phase):
        return cmath.exp(1j * ROOT_ANGLES[phase])


@dataclass(frozen=True)
class RadialityDiagnostic:
    ok: bool
    message: str = ""
    disconnected: tuple = ()
    cycle_branches: tuple = ()

    def __bool__(self):
        return self.ok


def base_topology(network):
    """Closed-branch set of the default configuration (link lines open)."""
    return frozenset(b.id for b in network.branches.values() if not b.normally_open)


def is_radial(network, closed):
    """Spanning-forest check: every bus reachable from exactly one root, no cycles."""
    closed = set(closed)
    unknown = closed - set(network.branches)
    if unknown:
        raise ModelError(f"unknown branch ids in closed set: {sorted(unknown)}")
    n_b = len(network.buses)
    roots = network.roots
    expected = n_b - len(roots)
    if len(closed) != expected:
        return RadialityDiagnostic(
            False, f"closed-branch count {len(closed)} != buses - roots = {expected}")
    adj = network.adjacency(closed)
    seen = {}
    cycle = []
    stack = [(r, None) for r in roots]
    for r in roots:
        seen[r] = None
    while stack:
        node, via = stack.pop()
        for nxt, bid in adj[node]:
            if bid == via:
                continue
            if nxt in seen:
                cycle.append(bid)
                continue
            seen[nxt] = bid
            stack.append((nxt, bid))
    missing = tuple(sorted(set(network.buses) - set(seen)))
    if missing or cycle:
        return RadialityDiagnostic(
            False,
            "closed set is not a spanning forest",
            disconnected=missing,
            cycle_branches=tuple(sorted(set(cycle))),
        )
    return RadialityDiagnostic(True, "radial")


def spanning_tree_parents(network, closed):
    """parent map bus -> (parent bus, branch id); roots map to (None, None)."""
    check = is_radial(network, closed)
    if not check:
        raise ModelError(f"topology not radial: {check.message}")
    adj = network.adjacency(closed)
    parent = {r: (None, None) for r in network.roots}
    order = list(network.roots)
    i = 0
    while i < len(order):
        node = order[i]
        i += 1
        for nxt, bid in adj[node]:
            if nxt not in parent:
                parent[nxt] = (node, bid)
                order.append(nxt)
    return parent, order


# ---------------------------------------------------------------------------
# instance files

_SCHEMA = {
    "type": "object",
    "required": ["name", "bases", "buses", "branches"],
    "properties": {
        "name": {"type": "string"},
        "bases": {
            "type": "object",
            "required": ["s_mva", "v_kv"],
            "properties": {
                "s_mva": {"type": "number", "exclusiveMinimum": 0},
                "v_kv": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "buses": {"type": "array", "items": {
            "type": "object",
            "required": ["id", "phases"],
            "properties": {
                "id": {"type": "integer"},
                "phases": {"type": "string", "pattern": "^[ABC]+$"},
                "load_mw": {"type": "object"},
                "load_mvar": {"type": "object"},
                "v_min_pu": {"type": "number"},
                "v_max_pu": {"type": "number"},
                "is_root": {"type": "boolean"},
            },
        }},
        "branches": {"type": "array", "items": {
            "type": "object",
            "required": ["id", "from", "to", "phases", "z_ohm"],
            "properties": {
                "id": {"type": "string"},
                "from": {"type": "integer"},
                "to": {"type": "integer"},
                "phases": {"type": "string", "pattern": "^[ABC]+$"},
                "z_ohm": {"type": "array"},
                "s_max_mva": {"type": "number"},
                "switchable": {"type": "boolean"},
                "normally_open": {"type": "boolean"},
                "transformer": {"type": ["object", "null"]},
            },
        }},
        "dg_sites": {"type": "array"},
        "var_devices": {"type": "array"},
        "curves": {"type": "object"},
        "uncertainty": {"type": "object"},
        "periods": {"type": "array", "items": {"type": "integer"}},
    },
}


def _phase_value(raw, phases, what, where):
    """Per-phase dict from a file field, tolerating explicit nulls."""
    out = {}
    if raw is None:
        return out
    for ph, val in raw.items():
        if ph not in PHASES:
            raise ParseError(f"{where}: unknown phase key {ph!r} in {what}")
        if val is None:
            continue
        if ph not in phases:
            raise ParseError(f"{where}: {what} given for absent phase {ph}")
        out[ph] = float(val)
    return out


def _parse_z(raw, phases, where, s_mva, v_kv):
    z = np.zeros((3, 3), dtype=complex)
    if len(raw) != 3:
        raise ParseError(f"{where}: z_ohm must be a 3x3 array of [re, im] pairs")
    for r in range(3):
        if len(raw[r]) != 3:
            raise ParseError(f"{where}: z_ohm row {r} must have 3 entries")
        for c in range(3):
            cell = raw[r][c]
            if cell is None:
                continue
            z[r, c] = complex(float(cell[0]), float(cell[1]))
    idx = [PHASE_INDEX[p] for p in phases]
    sub = z[np.ix_(idx, idx)]
    if not np.allclose(sub, sub.T):
        raise ParseError(f"{where}: impedance matrix must be symmetric")
    if np.any(np.abs(np.diag(sub)) == 0):
        raise ParseError(f"{where}: zero self-impedance on an existing phase")
    mask = np.zeros((3, 3), dtype=bool)
    mask[np.ix_(idx, idx)] = True
    z[~mask] = 0
    return ohm_to_pu(z, s_mva, v_kv)


@dataclass(frozen=True)
class Instance:
    network: Network
    scenario: ScenarioData


def load_instance(path):
    """Read and validate an instance file; returns (network, scenario) bundle."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if jsonschema is not None:
        try:
            jsonschema.validate(raw, _SCHEMA)
        except jsonschema.ValidationError as exc:
            loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ParseError(f"{path}: at {loc}: {exc.message}") from exc
    return parse_instance(raw, origin=str(path))


def parse_instance(raw, origin="<memory>"):
    s_mva = float(raw["bases"]["s_mva"])
    v_kv = float(raw["bases"]["v_kv"])

    buses = {}
    for spec in raw["buses"]:
        where = f"{origin}: bus {spec.get('id')}"
        phases = tuple(spec["phases"])
        if len(set(phases)) != len(phases):
            raise ParseError(f"{where}: repeated phase")
        p = _phase_value(spec.get("load_mw"), phases, "load_mw", where)
        q = _phase_value(spec.get("load_mvar"), phases, "load_mvar", where)
        load = {}
        for ph in phases:
            if ph in p or ph in q:
                load[ph] = complex(mw_to_pu(p.get(ph, 0.0), s_mva),
                                   mw_to_pu(q.get(ph, 0.0), s_mva))
        v_min = float(spec.get("v_min_pu", 0.95))
        v_max = float(spec.get("v_max_pu", 1.05))
        if not 0 < v_min < v_max:
            raise ParseError(f"{where}: need 0 < v_min < v_max")
        bus = Bus(
            id=int(spec["id"]),
            phases=phases,
            load=load,
            u_min={ph: v_min ** 2 for ph in phases},
            u_max={ph: v_max ** 2 for ph in phases},
            is_root=bool(spec.get("is_root", False)),
        )
        if bus.id in buses:
            raise ParseError(f"{where}: duplicate bus id")
        buses[bus.id] = bus

    branches = {}
    for spec in raw["branches"]:
        where = f"{origin}: branch {spec.get('id')}"
        phases = tuple(spec["phases"])
        z = _parse_z(spec["z_ohm"], phases, where, s_mva, v_kv)
        xf = spec.get("transformer")
        oltc = None
        if xf:
            oltc = OltcParams(float(xf["tau_min"]), float(xf["delta_tau"]), int(xf["taps"]))
        s_cap = mw_to_pu(float(spec.get("s_max_mva", 1e9)), s_mva)
        br = Branch(
            id=str(spec["id"]),
            from_bus=int(spec["from"]),
            to_bus=int(spec["to"]),
            phases=phases,
            z=z,
            s_max={ph: s_cap for ph in phases},
            switchable=bool(spec.get("switchable", True)),
            normally_open=bool(spec.get("normally_open", False)),
            transformer=oltc,
        )
        if br.id in branches:
            raise ParseError(f"{where}: duplicate branch id")
        branches[br.id] = br

    dg_sites = {}
    for spec in raw.get("dg_sites", []):
        where = f"{origin}: dg at bus {spec.get('bus')}"
        phases = tuple(spec["phases"])
        ymax_raw = spec.get("y_max_mw")
        y_max = {ph: (mw_to_pu(float(ymax_raw), s_mva) if ymax_raw is not None else math.inf)
                 for ph in phases}
        site = DgSite(
            bus=int(spec["bus"]),
            phases=phases,
            theta_min=float(spec["theta_min"]),
            theta_max=float(spec["theta_max"]),
            y_max=y_max,
        )
        if site.bus in dg_sites:
            raise ParseError(f"{where}: duplicate dg site")
        dg_sites[site.bus] = site

    var_devices = []
    for spec in raw.get("var_devices", []):
        kind = spec.get("kind")
        phases = tuple(spec["phases"])
        if kind == "continuous":
            dev = VarDevice(bus=int(spec["bus"]), kind=kind, phases=phases,
                            q_min=mw_to_pu(float(spec["q_min_mvar"]), s_mva),
                            q_max=mw_to_pu(float(spec["q_max_mvar"]), s_mva))
        elif kind == "discrete":
            dev = VarDevice(bus=int(spec["bus"]), kind=kind, phases=phases,
                            delta_q=mw_to_pu(float(spec["delta_q_mvar"]), s_mva),
                            chi_max=int(spec["chi_max"]))
        else:
            raise ParseError(f"{origin}: var device at bus {spec.get('bus')}: bad kind")
        var_devices.append(dev)

    try:
        network = Network(
            name=str(raw.get("name", "network")),
            buses=buses,
            branches=branches,
            dg_sites=dg_sites,
            var_devices=tuple(var_devices),
            bases=(s_mva, v_kv),
        )
    except ModelError as exc:
        raise ParseError(f"{origin}: {exc}") from exc

    curves = raw.get("curves", {})
    load_shape = tuple(float(v) for v in curves.get("load", [1.0]))
    pv_shape = tuple(float(v) for v in curves.get("pv", [1.0]))
    if len(load_shape) != len(pv_shape):
        raise ParseError(f"{origin}: load and pv curves must have equal length")
    n_t = len(load_shape)
    periods = tuple(int(t) for t in raw.get("periods", range(1, n_t + 1)))
    for t in periods:
        if not 1 <= t <= n_t:
            raise ParseError(f"{origin}: period {t} outside curve range 1..{n_t}")

    unc = raw.get("uncertainty", {})
    dev_dg = float(unc.get("dev_dg", 0.0))
    dev_load = float(unc.get("dev_load", 0.0))
    braw = unc.get("budget")
    budget = {}
    if braw is not None:
        if len(braw) != n_t:
            raise ParseError(f"{origin}: budget list must have one entry per period")
        budget = {t: (None if braw[t - 1] is None else int(braw[t - 1])) for t in periods}
    else:
        budget = {t: None for t in periods}

    eta_hat = {
        site.bus: {ph: pv_shape for ph in site.phases}
        for site in network.dg_sites.values()
    }
    scenario = ScenarioData(
        periods=periods,
        load_shape=load_shape,
        pv_shape=pv_shape,
        eta_hat=eta_hat,
        dev_dg=dev_dg,
        dev_load=dev_load,
        budget=budget,
    )
    return Instance(network=network, scenario=scenario)


def load_network(path):
    return load_instance(path).network
