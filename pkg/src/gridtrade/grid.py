"""Network data model, scenario files and bus normalization.

A scenario is one JSON document with top-level keys ``base``, ``network``,
``aggregators``, ``generators`` and ``market``; the shipped schema
``schemas/scenario.schema.json`` is authoritative for field names. Electrical
quantities are per-unit on the ``base`` declared in the file; fields ending in
``_hours`` are hours and fields ending in ``_prob`` are probabilities. Slot
indices and counts are plain integers.

Every non-slack bus hosts exactly one entity. :func:`normalize_buses` enforces
this by splitting buses that host both an aggregator and a generator (the two
halves are joined by a tiny series reactance) and by marking empty buses as
virtual aggregators with no demand.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Sequence

import jsonschema
import numpy as np

from gridtrade.appliance import ApplianceSpec
from gridtrade.generator import GeneratorAsset, RenewableSpec

BUS_KINDS = ("aggregator", "generator", "slack", "virtual-aggregator")
SPLIT_REACTANCE = 1e-6
UNLIMITED = 1e9  # s_max of split branches; never binds


class ScenarioError(ValueError):
    """Invalid scenario content; ``locus`` names the offending field or line."""

    def __init__(self, message: str, locus: str = ""):
        super().__init__(f"{locus}: {message}" if locus else message)
        self.locus = locus


class DuplicateEntityError(ScenarioError):
    pass


class DisconnectedNetworkError(ScenarioError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str = "virtual-aggregator"
    g_shunt: float = 0.0
    b_shunt: float = 0.0
    v_min: float = 0.95
    v_max: float = 1.05


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    s_max: float
    alpha: float = math.pi / 6

    @property
    def sides(self) -> int:
        return int(round(2.0 * math.pi / self.alpha))


@dataclass(frozen=True)
class NetworkModel:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    split_reactance: float = SPLIT_REACTANCE

    @property
    def n(self) -> int:
        return len(self.buses)

    @property
    def ids(self) -> list[int]:
        return [b.id for b in self.buses]

    def index(self) -> dict[int, int]:
        """Bus id to row position."""
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def slack(self) -> int:
        slack = [b.id for b in self.buses if b.kind == "slack"]
        if len(slack) != 1:
            raise ScenarioError(f"exactly one slack bus required, found {len(slack)}", "network.buses")
        return slack[0]

    def bus(self, bus_id: int) -> Bus:
        return self.buses[self.index()[bus_id]]


@dataclass(frozen=True)
class Base:
    mva: float = 0.001
    kv: float = 4.16


@dataclass(frozen=True)
class AggregatorConfig:
    bus: int
    power_factor: float
    appliances: tuple[ApplianceSpec, ...] = ()
    users: int = 0

    @property
    def reactive_factor(self) -> float:
        """``sqrt((1 - PF^2) / PF^2)``: reactive demand per unit of active demand."""
        pf = self.power_factor
        return math.sqrt(max(1.0 - pf * pf, 0.0) / (pf * pf))


@dataclass(frozen=True)
class MarketConfig:
    """Market and solver settings.

    ``step_base`` is the initial step of the ``inv_sqrt`` schedule
    ``step_base / sqrt(k)``; ``penalty`` weights the squared balance residual
    added to the operator's Lagrangian and sets the scale of the network
    step; ``mu_scale`` scales the multiplier step relative to ``penalty``.
    ``agent_prox`` is the proximal step of type-1 appliance responses (zero
    gives the plain best response). ``exact_network`` moves the network state
    to its exact maximizer each iteration instead of taking the decaying step.
    """

    horizon: int = 24
    slot_hours: float = 1.0
    vartheta: float = 10.0
    xi1: float = 1e-2
    xi2: float = 1e-2
    step_schedule: str = "inv_sqrt"
    step_base: float = 0.1
    mu_scale: float = 0.5
    penalty: float = 1.0
    max_iters: int = 2000
    seed: int = 0
    agent_prox: float = 1.0
    exact_network: bool = False


@dataclass(frozen=True)
class Scenario:
    name: str
    network: NetworkModel
    aggregators: tuple[AggregatorConfig, ...]
    generators: tuple[GeneratorAsset, ...]
    market: MarketConfig
    base: Base = Base()
    description: str = ""

    @property
    def horizon(self) -> int:
        return self.market.horizon

    def entity_at(self, bus_id: int):
        for a in self.aggregators:
            if a.bus == bus_id:
                return a
        for g in self.generators:
            if g.bus == bus_id:
                return g
        return None

    def with_market(self, **changes) -> "Scenario":
        return replace(self, market=replace(self.market, **changes))


# ---------------------------------------------------------------- normalization

def check_connected(network: NetworkModel) -> None:
    idx = network.index()
    adj: dict[int, list[int]] = {b: [] for b in idx}
    for br in network.branches:
        adj[br.from_bus].append(br.to_bus)
        adj[br.to_bus].append(br.from_bus)
    start = network.buses[0].id
    seen = {start}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for w in adj[u]:
            if w not in seen:
                seen.add(w)
                queue.append(w)
    if len(seen) != len(idx):
        missing = sorted(set(idx) - seen)
        raise DisconnectedNetworkError(f"buses {missing} are not connected to bus {start}", "network")


def normalize_buses(network: NetworkModel, entities: Sequence[tuple[str, int]]
                    ) -> tuple[NetworkModel, dict[tuple[str, int], int]]:
    """Give every non-slack bus exactly one entity.

    Parameters
    ----------
    network : NetworkModel
        Raw network; only the slack designation among bus kinds is used.
    entities : sequence of (kind, bus id)
        ``kind`` is ``"aggregator"`` or ``"generator"``.

    Returns
    -------
    network : NetworkModel
        Buses hosting both kinds keep the generator; the aggregator moves to a
        new bus joined by a branch with ``r = 0`` and ``x = split_reactance``.
        Empty non-slack buses become ``virtual-aggregator``.
    remap : dict
        ``(kind, original bus) -> bus`` for every entity.
    """
    check_connected(network)
    hosted: dict[int, list[str]] = {b.id: [] for b in network.buses}
    for kind, bus in entities:
        if kind not in ("aggregator", "generator"):
            raise ScenarioError(f"unknown entity kind {kind!r}")
        if bus not in hosted:
            raise ScenarioError(f"{kind} references unknown bus {bus}", f"{kind}s")
        if kind in hosted[bus]:
            raise DuplicateEntityError(f"bus {bus} hosts more than one {kind}", f"{kind}s")
        hosted[bus].append(kind)
    next_id = max(hosted) + 1
    buses: list[Bus] = []
    branches = list(network.branches)
    extra: list[Bus] = []
    remap: dict[tuple[str, int], int] = {}
    for b in network.buses:
        kinds = hosted[b.id]
        if b.kind == "slack":
            buses.append(b)
            if len(kinds) == 2:
                remap[("generator", b.id)] = b.id
                extra.append(Bus(next_id, "aggregator", 0.0, 0.0, b.v_min, b.v_max))
                branches.append(Branch(b.id, next_id, 0.0, network.split_reactance, UNLIMITED))
                remap[("aggregator", b.id)] = next_id
                next_id += 1
            elif kinds:
                remap[(kinds[0], b.id)] = b.id
            continue
        if len(kinds) == 2:
            buses.append(replace(b, kind="generator"))
            remap[("generator", b.id)] = b.id
            extra.append(Bus(next_id, "aggregator", 0.0, 0.0, b.v_min, b.v_max))
            branches.append(Branch(b.id, next_id, 0.0, network.split_reactance, UNLIMITED))
            remap[("aggregator", b.id)] = next_id
            next_id += 1
        elif len(kinds) == 1:
            buses.append(replace(b, kind=kinds[0]))
            remap[(kinds[0], b.id)] = b.id
        else:
            buses.append(replace(b, kind="virtual-aggregator"))
    out = NetworkModel(tuple(buses + extra), tuple(branches), network.split_reactance)
    return out, remap


# ---------------------------------------------------------------- JSON I/O

def _schema(name: str) -> dict:
    text = resources.files("gridtrade").joinpath("schemas", name).read_text()
    return json.loads(text)


def schema(name: str = "scenario") -> dict:
    """Load a shipped JSON schema: ``scenario``, ``summary`` or ``compare``."""
    return _schema(f"{name}.schema.json")


def _tuple(v):
    return None if v is None else tuple(float(x) for x in v)


def _scalar_or_tuple(v):
    if isinstance(v, (list, tuple)):
        return tuple(float(x) for x in v)
    return float(v)


def _appliance_from(d: dict) -> ApplianceSpec:
    return ApplianceSpec(
        id=str(d["id"]), type=int(d["type"]), wake_prob=tuple(float(x) for x in d["wake_prob"]),
        e_min=_scalar_or_tuple(d["e_min"]), e_max=_scalar_or_tuple(d["e_max"]),
        e_nom=float(d["e_nom"]), E_nom=float(d["E_nom"]), kappa=float(d["kappa"]),
        count=int(d.get("count", 1)), window_offset=int(d.get("window_offset", 0)),
        window_length=int(d.get("window_length", 1)),
        E_min=None if d.get("E_min") is None else float(d["E_min"]),
        E_max=None if d.get("E_max") is None else float(d["E_max"]),
        kappa_out=float(d.get("kappa_out", 0.0)),
        kappa_profile=_tuple(d.get("kappa_profile")),
        kappa_out_profile=_tuple(d.get("kappa_out_profile")),
        kernel=str(d.get("kernel", "log1p")),
        e_out_max=None if d.get("e_out_max") is None else float(d["e_out_max"]),
    )


def _appliance_to(a: ApplianceSpec) -> dict:
    d: dict[str, Any] = {
        "id": a.id, "type": a.type, "count": a.count,
        "window_offset": a.window_offset, "window_length": a.window_length,
        "e_min": list(a.e_min) if isinstance(a.e_min, tuple) else a.e_min,
        "e_max": list(a.e_max) if isinstance(a.e_max, tuple) else a.e_max,
    }
    if a.E_min is not None:
        d["E_min"] = a.E_min
        d["E_max"] = a.E_max
    d.update({"e_nom": a.e_nom, "E_nom": a.E_nom, "kappa": a.kappa, "kappa_out": a.kappa_out})
    if a.kappa_profile is not None:
        d["kappa_profile"] = list(a.kappa_profile)
    if a.kappa_out_profile is not None:
        d["kappa_out_profile"] = list(a.kappa_out_profile)
    d["kernel"] = a.kernel
    if a.e_out_max is not None:
        d["e_out_max"] = a.e_out_max
    d["wake_prob"] = list(a.wake_prob)
    return d


def scenario_from_dict(doc: dict, normalize: bool = True) -> Scenario:
    """Validate a parsed scenario document and build the :class:`Scenario`."""
    try:
        jsonschema.validate(doc, schema("scenario"))
    except jsonschema.ValidationError as exc:
        locus = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ScenarioError(exc.message, locus) from None
    net = doc["network"]
    buses = tuple(Bus(int(b["id"]), str(b.get("kind", "virtual-aggregator")),
                      float(b.get("g_shunt", 0.0)), float(b.get("b_shunt", 0.0)),
                      float(b.get("v_min", 0.95)), float(b.get("v_max", 1.05)))
                  for b in net["buses"])
    branches = tuple(Branch(int(r["from"]), int(r["to"]), float(r["r"]), float(r["x"]),
                            float(r["s_max"]), float(r.get("alpha", math.pi / 6)))
                     for r in net["branches"])
    network = NetworkModel(buses, branches, float(net.get("split_reactance", SPLIT_REACTANCE)))
    m = doc["market"]
    step = m.get("step", {})
    market = MarketConfig(
        horizon=int(m["horizon"]), slot_hours=float(m.get("slot_hours", 1.0)),
        vartheta=float(m["vartheta"]), xi1=float(m["xi1"]), xi2=float(m["xi2"]),
        step_schedule=str(step.get("schedule", "inv_sqrt")),
        step_base=float(step.get("base", 0.1)), mu_scale=float(step.get("mu_scale", 0.5)),
        penalty=float(m.get("penalty", 1.0)), max_iters=int(m.get("max_iters", 2000)),
        seed=int(m.get("seed", 0)), agent_prox=float(m.get("agent_prox", 1.0)),
        exact_network=bool(m.get("exact_network", False)))
    aggs = tuple(AggregatorConfig(int(a["bus"]), float(a["power_factor"]),
                                  tuple(_appliance_from(x) for x in a.get("appliances", [])),
                                  int(a.get("users", 0)))
                 for a in doc["aggregators"])
    gens = []
    for g in doc["generators"]:
        ren = g.get("renewable")
        ren_spec = None
        if ren is not None:
            ren_spec = RenewableSpec(str(ren.get("kind", "pv")), _tuple(ren["p_min"]), _tuple(ren["p_max"]),
                                     _tuple(ren.get("p_actual")))
        a2, a1, a0 = (float(c) for c in g["cost"])
        gens.append(GeneratorAsset(int(g["bus"]), a2, a1, a0, float(g["p_min"]), float(g["p_max"]),
                                   float(g.get("q_min", 0.0)), float(g.get("q_max", 0.0)), ren_spec))
    base = Base(float(doc["base"]["mva"]), float(doc["base"]["kv"]))
    scen = Scenario(str(doc.get("name", "scenario")), network, aggs, tuple(gens), market, base,
                    str(doc.get("description", "")))
    if normalize:
        scen = normalize_scenario(scen)
    validate_scenario(scen)
    return scen


def normalize_scenario(scen: Scenario) -> Scenario:
    entities = [("aggregator", a.bus) for a in scen.aggregators] + \
               [("generator", g.bus) for g in scen.generators]
    net, remap = normalize_buses(scen.network, entities)
    aggs = tuple(replace(a, bus=remap[("aggregator", a.bus)]) for a in scen.aggregators)
    gens = tuple(replace(g, bus=remap[("generator", g.bus)]) for g in scen.generators)
    return replace(scen, network=net, aggregators=aggs, generators=gens)


def validate_scenario(scen: Scenario) -> None:
    """Check every scenario invariant; raise :class:`ScenarioError` naming the first failure."""
    net = scen.network
    ids = net.ids
    if len(set(ids)) != len(ids):
        raise ScenarioError("bus ids must be unique", "network.buses")
    _ = net.slack
    for b in net.buses:
        loc = f"network.buses[id={b.id}]"
        if b.kind not in BUS_KINDS:
            raise ScenarioError(f"unknown bus kind {b.kind!r}", loc)
        if not (0.0 < b.v_min <= b.v_max):
            raise ScenarioError("need 0 < v_min <= v_max", loc)
    idx = net.index()
    for k, br in enumerate(net.branches):
        loc = f"network.branches[{k}]"
        if br.from_bus not in idx or br.to_bus not in idx:
            raise ScenarioError("branch references an unknown bus", loc)
        if br.from_bus == br.to_bus:
            raise ScenarioError("branch connects a bus to itself", loc)
        if br.r < 0.0 or (br.x <= 0.0 and not (br.r == 0.0 and br.x == 0.0)):
            raise ScenarioError("need r >= 0 and x > 0 (or r = x = 0 for a split)", loc)
        if br.s_max <= 0.0:
            raise ScenarioError("s_max must be positive", loc)
        sides = 2.0 * math.pi / br.alpha
        if abs(sides - round(sides)) > 1e-9 or round(sides) < 4:
            raise ScenarioError("2*pi/alpha must be an integer >= 4", loc)
    check_connected(net)
    m = scen.market
    if m.horizon < 1:
        raise ScenarioError("horizon must be >= 1", "market.horizon")
    if m.xi1 <= 0.0 or m.xi2 <= 0.0:
        raise ScenarioError("tolerances must be positive", "market")
    if m.vartheta < 0.0:
        raise ScenarioError("vartheta must be nonnegative", "market.vartheta")
    if m.step_schedule != "inv_sqrt":
        raise ScenarioError(f"unknown step schedule {m.step_schedule!r}", "market.step.schedule")
    if m.step_base <= 0.0 or m.penalty <= 0.0 or m.mu_scale <= 0.0:
        raise ScenarioError("step base, mu_scale and penalty must be positive", "market")
    if m.agent_prox < 0.0:
        raise ScenarioError("agent_prox must be nonnegative", "market.agent_prox")
    seen: dict[int, str] = {}
    for i, a in enumerate(scen.aggregators):
        loc = f"aggregators[{i}]"
        if a.bus not in idx:
            raise ScenarioError(f"unknown bus {a.bus}", loc)
        if a.bus in seen:
            raise DuplicateEntityError(f"bus {a.bus} already hosts a {seen[a.bus]}", loc)
        seen[a.bus] = "aggregator"
        if not (0.0 < a.power_factor <= 1.0):
            raise ScenarioError("power_factor must lie in (0, 1]", loc)
        names = [s.id for s in a.appliances]
        if len(set(names)) != len(names):
            raise ScenarioError("appliance ids must be unique within an aggregator", loc)
        for s in a.appliances:
            try:
                s.validate(m.horizon)
            except ValueError as exc:
                raise ScenarioError(str(exc), loc) from None
    for j, g in enumerate(scen.generators):
        loc = f"generators[{j}]"
        if g.bus not in idx:
            raise ScenarioError(f"unknown bus {g.bus}", loc)
        if g.bus in seen:
            raise DuplicateEntityError(f"bus {g.bus} already hosts a {seen[g.bus]}", loc)
        seen[g.bus] = "generator"
        try:
            g.validate(m.horizon)
        except ValueError as exc:
            raise ScenarioError(str(exc), loc) from None
    for b in net.buses:
        if b.kind == "slack":
            continue
        want = seen.get(b.id, "virtual-aggregator")
        if b.kind != want:
            raise ScenarioError(f"bus kind {b.kind!r} does not match its entity ({want})",
                                f"network.buses[id={b.id}]")


def scenario_to_dict(scen: Scenario) -> dict:
    net = scen.network
    m = scen.market
    return {
        "name": scen.name,
        "description": scen.description,
        "base": {"mva": scen.base.mva, "kv": scen.base.kv},
        "network": {
            "split_reactance": net.split_reactance,
            "buses": [{"id": b.id, "kind": b.kind, "g_shunt": b.g_shunt, "b_shunt": b.b_shunt,
                       "v_min": b.v_min, "v_max": b.v_max} for b in net.buses],
            "branches": [{"from": r.from_bus, "to": r.to_bus, "r": r.r, "x": r.x,
                          "s_max": r.s_max, "alpha": r.alpha} for r in net.branches],
        },
        "aggregators": [{"bus": a.bus, "power_factor": a.power_factor, "users": a.users,
                         "appliances": [_appliance_to(s) for s in a.appliances]}
                        for a in scen.aggregators],
        "generators": [_generator_to(g) for g in scen.generators],
        "market": {
            "horizon": m.horizon, "slot_hours": m.slot_hours, "vartheta": m.vartheta,
            "xi1": m.xi1, "xi2": m.xi2,
            "step": {"schedule": m.step_schedule, "base": m.step_base, "mu_scale": m.mu_scale},
            "penalty": m.penalty, "max_iters": m.max_iters, "seed": m.seed,
            "agent_prox": m.agent_prox, "exact_network": m.exact_network,
        },
    }


def _generator_to(g: GeneratorAsset) -> dict:
    d: dict[str, Any] = {"bus": g.bus, "cost": [g.a2, g.a1, g.a0], "p_min": g.p_min, "p_max": g.p_max,
                         "q_min": g.q_min, "q_max": g.q_max}
    if g.renewable is not None:
        r = g.renewable
        d["renewable"] = {"kind": r.kind, "p_min": list(r.p_min), "p_max": list(r.p_max)}
        if r.p_actual is not None:
            d["renewable"]["p_actual"] = list(r.p_actual)
    return d


def loads_scenario(text: str, source: str = "<string>") -> Scenario:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(exc.msg, f"{source} line {exc.lineno} column {exc.colno}") from None
    return scenario_from_dict(doc)


def load_scenario(path: str | Path) -> Scenario:
    """Read, validate and normalize a scenario file.

    Raises
    ------
    ScenarioError
        Parse errors (with line and column), schema or invariant violations
        (with the field path) and duplicate entities per bus.
    """
    path = Path(path)
    return loads_scenario(path.read_text(), str(path))


def dumps_scenario(scen: Scenario) -> str:
    return json.dumps(scenario_to_dict(scen), indent=1)


def write_scenario(scen: Scenario, path: str | Path) -> None:
    Path(path).write_text(dumps_scenario(scen) + "\n")


def builtin_path(name: str) -> Path:
    """Path of a shipped scenario (``ref5``, ``toy2``, ``feeder13``, ``feeder37``, ``feeder123``)."""
    fname = name if name.endswith(".json") else f"{name}.json"
    return Path(str(resources.files("gridtrade").joinpath("scenarios", fname)))


def builtin_scenario(name: str) -> Scenario:
    return load_scenario(builtin_path(name))


def resolve_scenario_path(arg: str | Path) -> Path:
    """Accept a path, or the bare name of a shipped scenario."""
    p = Path(arg)
    if p.exists():
        return p
    cand = builtin_path(p.name)
    if cand.exists():
        return cand
    return p


# ---------------------------------------------------------------- synthetic feeders

@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic radial feeder.

    Attributes
    ----------
    buses : int
        Total bus count including the slack (the substation).
    gens : int
        Generator count; the first sits at the slack, the rest at random buses.
        Every other non-slack bus hosts an aggregator.
    users : (int, int)
        Inclusive range of households per aggregator.
    renewable_share : float
        Fraction of the non-slack generators that carry a solar unit.
    horizon : int
        Slots per day (one hour each).
    branch_r : (float, float)
        Range of the relative branch resistances before scaling.
    peak_drop : float
        Voltage drop at the farthest bus when the substation alone serves the
        estimated evening peak; all impedances are scaled to hit it, so
        feeders of any size are equally stiff. Local generation keeps the
        realized drop well below it.
    s_max : float, optional
        Branch limit; defaults to 1.5 times the estimated peak.
    """

    buses: int
    gens: int
    users: tuple[int, int] = (100, 500)
    renewable_share: float = 0.5
    horizon: int = 24
    name: str | None = None
    vartheta: float = 1.0
    xi: float = 1e-2
    max_iters: int = 250
    branch_r: tuple[float, float] = (0.5, 1.5)
    x_over_r: float = 2.0
    peak_drop: float = 0.1
    s_max: float | None = None
    v_bounds: tuple[float, float] = (0.9, 1.1)


# Appliance classes of one household: (id, type, ownership rate, window offset,
# window length, e_min, e_max, E_min, E_max, e_nom, E_nom, kappa, kappa_out,
# wake-time peaks as (mean slot, spread, weight)). Energies in kWh per hour slot.
HOUSEHOLD_CLASSES = (
    ("ev", 1, 0.15, 0, 8, 0.0, 3.3, 6.0, 12.0, 3.3, 9.9, 0.6, 0.0, ((18.5, 2.0, 1.0),)),
    ("wash", 2, 0.40, 0, 4, 0.2, 1.0, 1.0, 3.0, 1.0, 2.0, 0.3, 0.02, ((9.0, 2.5, 0.4), (19.0, 2.0, 0.6))),
    ("dish", 2, 0.40, 0, 5, 0.0, 1.2, 1.2, 2.4, 1.2, 1.2, 0.25, 0.01, ((20.0, 1.5, 1.0),)),
    ("hvac", 3, 0.60, 0, 6, 0.3, 3.0, None, None, 2.0, 8.0, 0.8, 0.05, ((15.0, 2.5, 1.0),)),
)
WAKE_MASS = 0.9  # chance a unit wakes at all during the day


def _wake_profile(peaks, horizon: int, offset: int, length: int, ctype: int) -> list[float]:
    h = np.arange(1, horizon + 1, dtype=float)
    scale = horizon / 24.0
    p = np.zeros(horizon)
    for mean, spread, weight in peaks:
        p += weight * np.exp(-0.5 * ((h - mean * scale) / (spread * scale)) ** 2)
    if ctype in (1, 2):
        # a window cut short by the end of the day could make the energy band infeasible
        p[h + offset + length - 1 > horizon] = 0.0
    if p.sum() <= 0.0:
        return [0.0] * horizon
    p = WAKE_MASS * p / p.sum()
    return [round(float(x), 6) for x in p]


def _solar_shape(horizon: int) -> np.ndarray:
    h = (np.arange(horizon) + 0.5) * 24.0 / horizon
    return np.clip(np.sin(np.pi * (h - 6.0) / 12.0), 0.0, None)


def _scaled_branches(buses, tree, aggs, spec: SyntheticSpec, peak: float) -> tuple[Branch, ...]:
    """Branches of ``tree`` with impedances scaled to the target peak voltage drop."""
    from gridtrade.linpf import assemble_lambda, solve_flow

    s_max = float(spec.s_max) if spec.s_max is not None else round(1.5 * peak, 1)
    unit = NetworkModel(tuple(buses), tuple(Branch(a, b, r, r * spec.x_over_r, s_max) for a, b, r in tree))
    blocks = assemble_lambda(unit)
    p = np.zeros(blocks.n); q = np.zeros(blocks.n)
    for a in aggs:
        load = 1.2 * a.users
        p[blocks.pos[a.bus]] = -load
        q[blocks.pos[a.bus]] = -load * a.reactive_factor
    drop = float(1.0 - solve_flow(blocks, p, q).v.min())
    k = spec.peak_drop / drop if drop > 0.0 else 1.0
    return tuple(Branch(a, b, float(f"{r * k:.6g}"), float(f"{r * k * spec.x_over_r:.6g}"), s_max)
                 for a, b, r in tree)


def generate_scenario(spec: SyntheticSpec, seed: int) -> Scenario:
    """Deterministic synthetic feeder for ``(spec, seed)``.

    The tree grows bus by bus, each new bus attaching to one of the previous
    six, which gives a long main trunk with short laterals. Households own
    the appliance classes of :data:`HOUSEHOLD_CLASSES` at the listed rates.
    Generators have quadratic costs drawn so that the fleet can cover the
    evening peak with headroom; solar units follow a half-sine day with a
    forecast band of +-25% around the realized output.

    Raises
    ------
    ScenarioError
        More generators than buses, fewer than two buses, an empty user range or a
        peak drop outside ``(0, 1)``.
    """
    n, g = int(spec.buses), int(spec.gens)
    if n < 2:
        raise ScenarioError("a feeder needs at least two buses", "spec.buses")
    if g < 1 or g > n:
        raise ScenarioError(f"cannot place {g} generators on {n} buses", "spec.gens")
    lo_u, hi_u = spec.users
    if lo_u < 1 or hi_u < lo_u:
        raise ScenarioError("users range must satisfy 1 <= min <= max", "spec.users")
    if not 0.0 < spec.peak_drop < 1.0:
        raise ScenarioError("peak_drop must lie in (0, 1)", "spec.peak_drop")
    H = int(spec.horizon)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(n, g)))
    vmin, vmax = spec.v_bounds
    buses = [Bus(1, "slack", v_min=vmin, v_max=vmax)]
    tree = []
    for i in range(2, n + 1):
        parent = int(rng.integers(max(1, i - 6), i))
        tree.append((parent, i, float(rng.uniform(*spec.branch_r))))
        buses.append(Bus(i, v_min=vmin, v_max=vmax))
    others = rng.permutation(np.arange(2, n + 1))
    gen_buses = [1] + sorted(int(b) for b in others[:g - 1])
    agg_buses = sorted(int(b) for b in others[g - 1:])
    apps_by_class = []
    for cid, ctype, rate, off, length, e0, e1, E0, E1, en, En, kap, kout, peaks in HOUSEHOLD_CLASSES:
        apps_by_class.append((cid, ctype, rate, dict(
            id=cid, type=ctype, wake_prob=tuple(_wake_profile(peaks, H, off, min(length, H), ctype)),
            e_min=e0, e_max=e1, e_nom=en, E_nom=En, kappa=kap, window_offset=off,
            window_length=min(length, H), E_min=E0, E_max=E1, kappa_out=kout)))
    aggs = []
    total_users = 0
    for b in agg_buses:
        users = int(rng.integers(lo_u, hi_u + 1))
        total_users += users
        pf = round(float(rng.uniform(0.9, 0.98)), 3)
        specs = []
        for cid, ctype, rate, kw in apps_by_class:
            count = int(rng.binomial(users, rate))
            if count:
                specs.append(ApplianceSpec(count=count, **kw))
        aggs.append(AggregatorConfig(b, pf, tuple(specs), users))
    # fleet sizing: evening peak of roughly 1.2 kW per household, capacity twice that
    peak = 1.2 * max(total_users, 1)
    cap = 2.0 * peak / g
    solar = _solar_shape(H)
    n_ren = int(round(spec.renewable_share * (g - 1)))
    ren_idx = set(range(1, g)) if n_ren >= g - 1 else set(int(i) + 1 for i in rng.choice(g - 1, n_ren, replace=False))
    gens = []
    for j, b in enumerate(gen_buses):
        a1 = round(float(rng.uniform(0.02, 0.05)), 4)
        # marginal cost at half capacity lands around 0.1 per kWh
        a2 = float(f"{(0.1 - a1) / cap * rng.uniform(0.8, 1.2):.4g}")
        ren = None
        if j in ren_idx:
            size = float(rng.uniform(0.1, 0.3)) * cap
            act = size * solar * rng.uniform(0.85, 1.0, H)
            ren = RenewableSpec("pv", tuple(round(float(x), 4) for x in 0.75 * act),
                                tuple(round(float(x), 4) for x in 1.25 * act),
                                tuple(round(float(x), 4) for x in act))
        gens.append(GeneratorAsset(b, a2, a1, 0.0, 0.0, round(cap, 3), 0.0, 0.0, ren))
    branches = _scaled_branches(buses, tree, aggs, spec, peak)
    elasticity = sum(1.0 / (2.0 * gg.a2) for gg in gens)
    market = MarketConfig(
        horizon=H, slot_hours=1.0, vartheta=spec.vartheta, xi1=spec.xi, xi2=spec.xi,
        step_base=2.0, mu_scale=0.5, penalty=float(f"{n / elasticity:.3g}"),
        max_iters=spec.max_iters, seed=int(seed))
    name = spec.name or f"feeder{n}"
    desc = (f"Synthetic radial feeder, {n} buses, {g} generators, {len(aggs)} aggregators "
            f"({lo_u}-{hi_u} households each), seed {seed}. An approximation for scaling studies, "
            "not a transcription of any published test feeder. Per-unit on 1 kVA.")
    net = NetworkModel(tuple(buses), branches)
    raw = Scenario(name, net, tuple(aggs), tuple(gens), market, Base(0.001, 4.16), desc)
    return scenario_from_dict(scenario_to_dict(raw))
