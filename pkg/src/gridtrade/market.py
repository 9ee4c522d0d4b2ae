"""Rolling-horizon market simulation.

Each slot ``t`` runs the iterative exchange between the agents and the
network operator until the network state stops moving:

1. every agent posts its profile over ``t..H``;
2. the operator updates angles, magnitudes and multipliers;
3. the operator broadcasts prices and penalties;
4. aggregators and generators re-solve at the new prices;
5. the step shrinks as ``base / sqrt(k)``.

The loop stops when the largest change in any angle is at most ``xi1`` and
the largest change in any magnitude at most ``xi2`` (both at once), or at the
iteration cap. Only slot ``t`` of the final decisions is committed; the rest
warm-starts slot ``t + 1``.

Randomness (wake times, initial profiles) comes from per-agent streams
spawned from the scenario seed, so results do not depend on thread count.
"""
from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from gridtrade import aggregator as agg_mod
from gridtrade.aggregator import AggregatorState, CohortBatch, build_batch, nominal_continuation
from gridtrade.appliance import utility as appliance_utility
from gridtrade.dno import DnoState, Injections, NetworkOperator, SignalBundle, network_step, risk, signals
from gridtrade.generator import GeneratorAsset, GeneratorDecision, initial_decision
from gridtrade.generator import local_solve as gen_solve
from gridtrade.grid import Scenario

MODES = ("uncertainty", "complete", "benchmark")
PURPOSE_WAKE, PURPOSE_INIT_AGG, PURPOSE_INIT_GEN = 0, 1, 2
TRACE_COLUMNS = ["iter", "slot", "bus", "theta", "vmag", "lambda", "gamma", "rho", "varrho", "residual"]


class NonConvergence(RuntimeError):
    pass


def stream(seed: int, purpose: int, index: int) -> np.random.Generator:
    """Independent random stream for one agent and one purpose."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(purpose, index)))


# ---------------------------------------------------------------- world

@dataclass
class World:
    """Realized wake events: ``events[bus]`` lists ``(slot, appliance id, units)``."""

    events: dict[int, list[tuple[int, str, int]]]

    @classmethod
    def sample(cls, scenario: Scenario, seed: int) -> "World":
        """Draw wake times slot by slot with the conditional wake probabilities.

        At slot ``t`` each still-asleep unit wakes with probability
        ``p(t) / (1 - sum_{h<t} p(h))``, so the realized wake slot of each
        unit follows ``p``; units may never wake when ``sum p < 1``.
        """
        H = scenario.horizon
        events: dict[int, list[tuple[int, str, int]]] = {}
        for i, a in enumerate(scenario.aggregators):
            rng = stream(seed, PURPOSE_WAKE, i)
            ev = []
            for spec in a.appliances:
                p = np.asarray(spec.wake_prob, dtype=float)
                left = spec.count
                mass = 1.0
                for t in range(1, H + 1):
                    if left == 0:
                        break
                    cond = 0.0 if mass <= 1e-15 else min(max(p[t - 1] / mass, 0.0), 1.0)
                    n = int(rng.binomial(left, cond)) if cond > 0.0 else 0
                    mass -= p[t - 1]
                    if n:
                        ev.append((t, spec.id, n))
                        left -= n
            ev.sort(key=lambda e: (e[0], e[1]))
            events[a.bus] = ev
        return cls(events)

    def at(self, bus: int, t: int) -> dict[str, int]:
        out: dict[str, int] = {}
        for slot, aid, n in self.events.get(bus, []):
            if slot == t:
                out[aid] = out.get(aid, 0) + n
        return out

    def write_csv(self, path) -> None:
        """One row per unit: ``slot, aggregator_bus, appliance_id``."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["slot", "aggregator_bus", "appliance_id"])
            rows = []
            for bus, ev in self.events.items():
                for slot, aid, n in ev:
                    rows.extend([(slot, bus, aid)] * n)
            for r in sorted(rows, key=lambda r: (r[0], r[1], r[2])):
                w.writerow(r)

    @classmethod
    def read_csv(cls, path) -> "World":
        counts: dict[tuple[int, int, str], int] = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                key = (int(row["aggregator_bus"]), int(row["slot"]), row["appliance_id"])
                counts[key] = counts.get(key, 0) + 1
        events: dict[int, list[tuple[int, str, int]]] = {}
        for (bus, slot, aid), n in sorted(counts.items()):
            events.setdefault(bus, []).append((slot, aid, n))
        return cls(events)


# ---------------------------------------------------------------- agents

class AggregatorAgent:
    """Market-side wrapper that caches the aggregator's constraint batch for the slot."""

    def __init__(self, state: AggregatorState, pos: int, rng: np.random.Generator):
        self.state = state
        self.pos = pos
        self.rng = rng
        self.batch: CohortBatch | None = None
        self.E = np.zeros((0, 0))
        self.sleeping = np.zeros(0)
        self.t = 0

    @property
    def bus(self) -> int:
        return self.state.bus

    def begin_slot(self, t: int, events: dict[str, int]) -> None:
        st = self.state
        agg_mod.wake_step(st, t, events, self.rng)
        self.t = t
        self.sleeping = agg_mod.sleeping_profile(st, t)
        if st.cohorts:
            self.batch = build_batch(st.cohorts, t)
            self.E = np.vstack([c.profile[t - 1:] for c in st.cohorts])
            if self.batch.fixed.any():
                pinned = self.batch.fixed.astype(bool)
                self.E[pinned] = self.batch.lo[pinned]
        else:
            self.batch = None
            self.E = np.zeros((0, st.horizon - t + 1))

    def load(self) -> np.ndarray:
        if self.batch is None:
            return self.sleeping.copy()
        return self.sleeping + self.batch.counts @ self.E

    def solve(self, rho: np.ndarray, tau: float = 0.0) -> None:
        self.state.prices = rho.copy()
        if self.batch is not None:
            try:
                self.E = self.batch.best_response(rho, self.E, tau)
            except ValueError as exc:
                raise agg_mod.AgentSolveError(str(exc), self.bus) from None

    def sync(self) -> None:
        """Write the cached decision back to the cohorts."""
        for c, e in zip(self.state.cohorts, self.E):
            c.profile[self.t - 1:] = e

    def utility(self) -> float:
        return 0.0 if self.batch is None else self.batch.utility(self.E)

    def snapshot(self):
        return self.E.copy()

    def restore(self, snap) -> None:
        self.E = snap


class GeneratorAgent:
    def __init__(self, asset: GeneratorAsset, pos: int, rng: np.random.Generator, exact: bool):
        self.asset = asset
        self.pos = pos
        self.rng = rng
        self.exact = exact
        self.decision: GeneratorDecision | None = None
        self.t = 0

    @property
    def bus(self) -> int:
        return self.asset.bus

    def begin_slot(self, t: int, H: int) -> None:
        slots = np.arange(t, H + 1)
        if self.decision is None:
            self.decision = initial_decision(self.asset, slots, self.rng, self.exact)
        else:
            d = self.decision
            lo, hi = self.asset.renewable_bounds(slots, self.exact)
            self.decision = GeneratorDecision(d.p_conv[1:].copy(), d.q_conv[1:].copy(),
                                              np.clip(d.p_ren[1:], lo, hi), lo, hi, d.confidence)
        self.t = t

    def solve(self, rho, varrho, beta) -> None:
        slots = np.arange(self.t, self.t + len(rho))
        self.decision = gen_solve(self.asset, rho, varrho, beta, slots, None, self.exact)

    def snapshot(self):
        return self.decision.copy()

    def restore(self, snap) -> None:
        self.decision = snap


# ---------------------------------------------------------------- messages

@dataclass
class Mailbox:
    """In-process message exchange with per-iteration sequence numbers.

    Agents post profiles tagged ``(slot, k)``; the operator consumes them only
    when every agent has posted, then broadcasts signals tagged ``(slot, k)``.
    An agent may only read signals whose tag matches the iteration it just
    posted for, which is the barrier the market relies on.
    """

    agents: int
    inbox: dict = field(default_factory=dict)
    outbox: tuple | None = None
    log: list = field(default_factory=list)

    def post(self, slot: int, k: int, bus: int, payload) -> None:
        key = (slot, k)
        box = self.inbox.setdefault(key, {})
        if bus in box:
            raise RuntimeError(f"agent at bus {bus} posted twice in iteration {k}")
        box[bus] = payload

    def collect(self, slot: int, k: int) -> dict:
        box = self.inbox.pop((slot, k), {})
        if len(box) != self.agents:
            raise RuntimeError(f"iteration {k}: {len(box)} of {self.agents} agent messages arrived")
        self.log.append(("collect", slot, k))
        return box

    def broadcast(self, slot: int, k: int, bundle: SignalBundle) -> None:
        if not self.log or self.log[-1] != ("collect", slot, k):
            raise RuntimeError("signals broadcast before all agent messages were consumed")
        self.outbox = (slot, k, bundle)
        self.log.append(("broadcast", slot, k))

    def read(self, slot: int, k: int) -> SignalBundle:
        if self.outbox is None or self.outbox[:2] != (slot, k):
            raise RuntimeError(f"agents expected signals for iteration {k}, found {self.outbox and self.outbox[:2]}")
        return self.outbox[2]


# ---------------------------------------------------------------- slot problems

@dataclass
class SlotProblem:
    """Data of the slot-``t`` problem shared by the market and the central solvers."""

    t: int
    T: int
    op: NetworkOperator
    agg_pos: list[int]
    agg_react: list[float]
    agg_batch: list[CohortBatch | None]
    agg_sleep: list[np.ndarray]
    gen_pos: list[int]
    gen_assets: list[GeneratorAsset]
    ren_lo: list[np.ndarray]
    ren_hi: list[np.ndarray]

    @property
    def vartheta(self) -> float:
        return self.op.scenario.market.vartheta


@dataclass
class IterationRecord:
    k: int
    slot: int
    step: float
    theta: np.ndarray
    v: np.ndarray
    lam: np.ndarray
    gam: np.ndarray
    rho: np.ndarray
    varrho: np.ndarray
    residual: np.ndarray
    dtheta: float
    dv: float
    seq: tuple[int, int]


@dataclass
class SlotOutcome:
    t: int
    iterations: int
    converged: bool
    residual: float
    wall_time: float
    p: np.ndarray
    q: np.ndarray
    signals: SignalBundle
    state: DnoState
    welfare: float
    risk: float = 0.0
    vartheta: float = 0.0

    @property
    def objective(self) -> float:
        """Welfare minus the weighted voltage-drop risk over slots ``t..H``."""
        return self.welfare - self.vartheta * self.risk


@dataclass
class SimulationResult:
    scenario: str
    mode: str
    seed: int
    horizon: int
    bus_ids: list[int]
    kinds: list[str]
    slots: list[SlotOutcome]
    trace: list[IterationRecord]
    committed: dict[str, np.ndarray]
    entities: list[dict]
    dominance: list[tuple[int, int, float, float]]
    problems: list[SlotProblem] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return all(s.converged for s in self.slots)


class Market:
    """Agents, operator and world for one simulation run."""

    def __init__(self, scenario: Scenario, mode: str = "uncertainty", seed: int | None = None,
                 world: World | None = None, threads: int = 1, max_iters: int | None = None,
                 op: NetworkOperator | None = None):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self.scenario = scenario
        self.mode = mode
        self.seed = scenario.market.seed if seed is None else int(seed)
        self.world = world if world is not None else World.sample(scenario, self.seed)
        self.threads = max(1, int(threads))
        self.max_iters = scenario.market.max_iters if max_iters is None else int(max_iters)
        self.op = op or NetworkOperator(scenario)
        self.H = scenario.horizon
        pos = self.op.blocks.pos
        agg_mode = {"uncertainty": "uncertainty", "complete": "complete", "benchmark": "benchmark"}[mode]
        self.aggs: list[AggregatorAgent] = []
        for i, a in enumerate(scenario.aggregators):
            st = AggregatorState.create(a.bus, a.power_factor, a.appliances, self.H, agg_mode)
            agent = AggregatorAgent(st, pos[a.bus], stream(self.seed, PURPOSE_INIT_AGG, i))
            if mode == "complete":
                for slot, aid, n in self.world.events.get(a.bus, []):
                    st.add_cohort(aid, slot, n, agent.rng, 1)
            self.aggs.append(agent)
        self.gens = [GeneratorAgent(g, pos[g.bus], stream(self.seed, PURPOSE_INIT_GEN, j), mode == "complete")
                     for j, g in enumerate(scenario.generators)]
        self.pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None
        self.state: DnoState | None = None

    def close(self) -> None:
        if self.pool is not None:
            self.pool.shutdown()
            self.pool = None

    def _map(self, fn, items):
        if self.pool is None:
            return [fn(x) for x in items]
        return list(self.pool.map(fn, items))

    # -- per-slot pieces -----------------------------------------------------
    def begin_slot(self, t: int) -> None:
        self._map(lambda a: a.begin_slot(t, self.world.at(a.bus, t)), self.aggs)
        for g in self.gens:
            g.begin_slot(t, self.H)
        T = self.H - t + 1
        if self.state is None:
            self.state = self.op.flat_state(T)
        else:
            self.state = DnoState(self.state.x[:, 1:].copy(), self.state.mu[:, 1:].copy(), 0, 0.0)

    def injections(self, T: int) -> Injections:
        n = self.op.n
        p = np.zeros((n, T)); q = np.zeros((n, T))
        ren = np.zeros((n, T)); ren_min = np.zeros((n, T))
        for a in self.aggs:
            load = a.load()
            p[a.pos] -= load
            q[a.pos] -= load * a.state.reactive_factor
        for g in self.gens:
            d = g.decision
            p[g.pos] += d.p_conv + d.p_ren
            q[g.pos] += d.q_conv
            ren[g.pos] = d.p_ren
            ren_min[g.pos] = d.ren_min
        return Injections(p, q, ren, ren_min, 0.0)

    def welfare(self) -> float:
        w = sum(a.utility() for a in self.aggs)
        w -= sum(float(g.asset.cost(g.decision.p_conv).sum()) for g in self.gens)
        return float(w)

    def problem(self, t: int) -> SlotProblem:
        T = self.H - t + 1
        return SlotProblem(
            t, T, self.op,
            [a.pos for a in self.aggs], [a.state.reactive_factor for a in self.aggs],
            [a.batch for a in self.aggs], [a.sleeping.copy() for a in self.aggs],
            [g.pos for g in self.gens], [g.asset for g in self.gens],
            [g.decision.ren_min.copy() for g in self.gens], [g.decision.ren_max.copy() for g in self.gens])

    def run_slot(self, t: int, trace: list | None = None) -> SlotOutcome:
        """Iterate slot ``t`` to the stopping test or the cap (best iterate kept)."""
        m = self.scenario.market
        start = time.perf_counter()
        self.begin_slot(t)
        T = self.H - t + 1
        op = self.op
        mailbox = Mailbox(len(self.aggs) + len(self.gens))
        state = self.state
        theta_prev, v_prev = op.theta_v(state.x)
        best = None
        converged = False
        k = 0
        inj = None
        r_post = None
        bundle = signals(op, state)
        while k < self.max_iters:
            k += 1
            # agents post profiles
            for a in self.aggs:
                mailbox.post(t, k, a.bus, a.load())
            for g in self.gens:
                mailbox.post(t, k, g.bus, g.decision)
            mailbox.collect(t, k)
            inj = self.injections(T)
            step = m.step_base / np.sqrt(k)
            state, r_pre = network_step(op, state, inj, step, m.penalty, m.mu_scale,
                                       m.exact_network)
            bundle = signals(op, state)
            mailbox.broadcast(t, k, bundle)
            sig = mailbox.read(t, k)
            rho, varrho, beta = sig.rho, sig.varrho, sig.beta
            self._map(lambda a: a.solve(rho[a.pos], m.agent_prox), self.aggs)
            self._map(lambda g: g.solve(rho[g.pos], varrho[g.pos], beta[g.pos]), self.gens)
            theta, v = op.theta_v(state.x)
            dth = float(np.abs(theta - theta_prev).max()) if theta.size else 0.0
            dv = float(np.abs(v - v_prev).max()) if v.size else 0.0
            theta_prev, v_prev = theta, v
            inj = self.injections(T)
            r_post = op.residual(state.x, inj)
            res = float(np.abs(r_post).max()) if r_post.size else 0.0
            if trace is not None:
                per_bus = np.zeros(op.n)
                rp = np.abs(r_post[:, 0])
                per_bus[:] = rp[:op.n]
                per_bus[op.blocks.nonslack] = np.maximum(per_bus[op.blocks.nonslack], rp[op.n:])
                trace.append(IterationRecord(k, t, step, theta[:, 0].copy(), v[:, 0].copy(),
                                             bundle.lam[:, 0].copy(), bundle.gam[:, 0].copy(),
                                             bundle.rho[:, 0].copy(), bundle.varrho[:, 0].copy(),
                                             per_bus, dth, dv, (t, k)))
            if best is None or res < best[0]:
                best = (res, state.copy(), [a.snapshot() for a in self.aggs],
                        [g.snapshot() for g in self.gens], bundle, k)
            if dth <= m.xi1 and dv <= m.xi2:
                converged = True
                break
        if not converged and best is not None:
            _, state, snaps_a, snaps_g, bundle, _ = best
            for a, s in zip(self.aggs, snaps_a):
                a.restore(s)
            for g, s in zip(self.gens, snaps_g):
                g.restore(s)
            inj = self.injections(T)
            r_post = op.residual(state.x, inj)
        self.state = state
        for a in self.aggs:
            a.sync()
        res = float(np.abs(r_post).max()) if r_post is not None and r_post.size else 0.0
        return SlotOutcome(t, k, converged, res, time.perf_counter() - start, inj.p.copy(), inj.q.copy(),
                           bundle, state.copy(), self.welfare(), risk(op, inj), m.vartheta)


def run_horizon(scenario: Scenario, mode: str = "uncertainty", seed: int | None = None,
                world: World | None = None, threads: int = 1, max_iters: int | None = None,
                keep_problems: bool = False, trace: bool = True,
                on_slot: Callable[[Market, SlotOutcome], None] | None = None,
                solver: Callable[[Market, int, list | None], SlotOutcome] | None = None,
                label: str | None = None) -> SimulationResult:
    """Run every slot of the horizon and collect committed decisions and metrics.

    Parameters
    ----------
    mode : ``"uncertainty"``, ``"complete"`` or ``"benchmark"``
        Complete information reveals every wake time and the realized
        renewable output at slot 1; benchmark pins every appliance to its
        nominal profile from waking.
    world : World, optional
        Exogenous wake events; sampled from the scenario seed when omitted.
    keep_problems : bool
        Keep each slot's :class:`SlotProblem` (for the central solvers).
    solver : callable, optional
        ``solver(market, t, trace)`` clears slot ``t`` in place of
        :meth:`Market.run_slot` (the central rolling horizon plugs in here).
    label : str, optional
        Mode recorded in the result; defaults to ``mode``.
    """
    mk = Market(scenario, mode, seed, world, threads, max_iters)
    H = scenario.horizon
    n = mk.op.n
    recs: list[IterationRecord] = []
    outcomes: list[SlotOutcome] = []
    problems: list[SlotProblem] = []
    dominance: list[tuple[int, int, float, float]] = []
    com = {key: np.zeros((n, H)) for key in
           ("p", "q", "load", "p_conv", "q_conv", "p_ren", "ren_min", "ren_max", "rho", "varrho", "beta",
            "lam", "gam", "theta", "vmag")}
    try:
        for t in range(1, H + 1):
            out = (solver or Market.run_slot)(mk, t, recs if trace else None)
            outcomes.append(out)
            if keep_problems:
                problems.append(mk.problem(t))
            sig = out.signals
            for key, arr in (("rho", sig.rho), ("varrho", sig.varrho), ("beta", sig.beta),
                             ("lam", sig.lam), ("gam", sig.gam), ("p", out.p), ("q", out.q)):
                com[key][:, t - 1] = arr[:, 0]
            theta, v = mk.op.theta_v(out.state.x)
            com["theta"][:, t - 1] = theta[:, 0]
            com["vmag"][:, t - 1] = v[:, 0]
            if mode != "benchmark":
                for a in mk.aggs:
                    rho = sig.rho[a.pos]
                    opt = agg_mod.profit(a.state, rho, t, a.sleeping)
                    comp = agg_mod.profit(a.state, rho, t, a.sleeping, nominal_continuation(a.state, t))
                    dominance.append((t, a.bus, opt, comp))
            if on_slot is not None:
                on_slot(mk, out)
            for a in mk.aggs:
                com["load"][a.pos, t - 1] = agg_mod.commit(a.state, t)
            for g in mk.gens:
                d = g.decision
                com["p_conv"][g.pos, t - 1] = d.p_conv[0]
                com["q_conv"][g.pos, t - 1] = d.q_conv[0]
                com["p_ren"][g.pos, t - 1] = d.p_ren[0]
                com["ren_min"][g.pos, t - 1] = d.ren_min[0]
                com["ren_max"][g.pos, t - 1] = d.ren_max[0]
    finally:
        mk.close()
    entities = []
    for a in mk.aggs:
        util = 0.0
        for c in a.state.all_cohorts():
            util += c.count * appliance_utility(c.app, c.committed, 1, 0.0)
        entities.append({"bus": a.bus, "kind": "aggregator", "utility": util})
    for g in mk.gens:
        asset = g.asset
        entities.append({"bus": g.bus, "kind": "generator",
                         "cost": [asset.a2, asset.a1, asset.a0]})
    ids = mk.op.blocks.ids
    res = SimulationResult(scenario.name, label or mode, mk.seed, H, ids, mk.op.kind, outcomes, recs, com, entities,
                           dominance, problems)
    res.metrics = compute_metrics(res)
    return res


def benchmark_run(scenario: Scenario, seed: int | None = None, world: World | None = None,
                  threads: int = 1, max_iters: int | None = None, **kw) -> SimulationResult:
    """Run without demand response: appliances draw ``e_nom`` for their nominal duration once awake."""
    return run_horizon(scenario, "benchmark", seed, world, threads, max_iters, **kw)


# ---------------------------------------------------------------- metrics

def par(profile: np.ndarray) -> float:
    """Peak-to-average ratio; ``nan`` for an all-zero profile."""
    profile = np.asarray(profile, dtype=float)
    mean = float(profile.mean()) if profile.size else 0.0
    if mean <= 0.0:
        return float("nan")
    return float(profile.max() / mean)


def compute_metrics(res: SimulationResult) -> dict:
    """Profits, PAR and peaks from committed data only (also used by ``report``)."""
    return metrics_from_committed(res.committed, res.entities, res.bus_ids, res.slots_table())


def _slots_table(self: SimulationResult) -> list[dict]:
    return [{"slot": s.t, "iterations": s.iterations, "converged": s.converged, "residual": s.residual}
            for s in self.slots]


SimulationResult.slots_table = _slots_table


def metrics_from_committed(com: dict[str, np.ndarray], entities: list[dict], bus_ids: Sequence[int],
                           slots: list[dict]) -> dict:
    pos = {b: i for i, b in enumerate(bus_ids)}
    agg_profit, gen_profit, gen_par, peak = {}, {}, {}, {}
    total_gen = None
    for ent in entities:
        i = pos[ent["bus"]]
        key = str(ent["bus"])
        if ent["kind"] == "aggregator":
            load = com["load"][i]
            agg_profit[key] = float(ent["utility"] - (load * com["rho"][i]).sum())
            peak[key] = float(load.max()) if load.size else 0.0
        else:
            a2, a1, a0 = ent["cost"]
            pc, pr = com["p_conv"][i], com["p_ren"][i]
            cost = a2 * pc * pc + a1 * pc + a0
            revenue = (pc + pr) * com["rho"][i] + com["q_conv"][i] * com["varrho"][i]
            shortage = com["beta"][i] * (pr - com["ren_min"][i])
            gen_profit[key] = float((revenue - cost - shortage).sum())
            gen = pc + pr
            gen_par[key] = par(gen)
            total_gen = gen.copy() if total_gen is None else total_gen + gen
    total_load = sum((com["load"][pos[e["bus"]]] for e in entities if e["kind"] == "aggregator"),
                     np.zeros(com["load"].shape[1]))
    return {
        "iterations": [int(s["iterations"]) for s in slots],
        "converged": [bool(s["converged"]) for s in slots],
        "max_residual": [float(s["residual"]) for s in slots],
        "profit": {"aggregators": agg_profit, "generators": gen_profit,
                   "aggregators_total": float(sum(agg_profit.values())),
                   "generators_total": float(sum(gen_profit.values()))},
        "par": {"generators": gen_par,
                "aggregate": par(total_gen) if total_gen is not None else float("nan")},
        "peak_demand": {"aggregators": peak, "aggregate": float(total_load.max()) if total_load.size else 0.0},
    }


# ---------------------------------------------------------------- outputs

def _fmt(x: float) -> str:
    return repr(float(x))


def trace_rows(res: SimulationResult):
    kinds = res.kinds
    for rec in res.trace:
        for b, bus in enumerate(res.bus_ids):
            varrho = _fmt(rec.varrho[b]) if kinds[b] == "generator" else ""
            yield [rec.k, rec.slot, bus, _fmt(rec.theta[b]), _fmt(rec.v[b]), _fmt(rec.lam[b]),
                   _fmt(rec.gam[b]), _fmt(rec.rho[b]), varrho, _fmt(rec.residual[b])]


COMMITTED_COLUMNS = ["slot", "bus", "kind", "p", "q", "load", "p_conv", "q_conv", "p_ren", "ren_min",
                     "ren_max", "rho", "varrho", "beta", "lambda", "gamma", "theta", "vmag"]
_COMMITTED_KEYS = ["p", "q", "load", "p_conv", "q_conv", "p_ren", "ren_min", "ren_max", "rho", "varrho",
                   "beta", "lam", "gam", "theta", "vmag"]


def summary(res: SimulationResult) -> dict:
    m = res.metrics
    return {
        "scenario": res.scenario,
        "mode": res.mode,
        "seed": res.seed,
        "horizon": res.horizon,
        "converged": bool(all(m["converged"])),
        "iterations": m["iterations"],
        "max_residual": m["max_residual"],
        "profit": m["profit"],
        "par": m["par"],
        "peak_demand": m["peak_demand"],
        "dominance_violations": int(sum(1 for d in res.dominance if d[2] < d[3] - dominance_tol(d[3]))),
    }


def dominance_tol(ref: float) -> float:
    """Allowance for floating-point noise in the optimized-versus-comparator profit check."""
    return 1e-9 * max(1.0, abs(ref))


def write_outputs(res: SimulationResult, out: str | Path, dump_signals: bool = False) -> dict:
    """Write ``trace.csv``, ``committed.csv``, ``slots.csv``, ``entities.json``,
    ``summary.json`` and ``timing.json`` into ``out``; returns the summary."""
    from gridtrade.grid import schema
    import jsonschema

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        w.writerows(trace_rows(res))
    with open(out / "committed.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMMITTED_COLUMNS)
        for t in range(res.horizon):
            for b, bus in enumerate(res.bus_ids):
                w.writerow([t + 1, bus, res.kinds[b]] + [_fmt(res.committed[k][b, t]) for k in _COMMITTED_KEYS])
    with open(out / "slots.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slot", "iterations", "converged", "residual"])
        for s in res.slots_table():
            w.writerow([s["slot"], s["iterations"], int(s["converged"]), _fmt(s["residual"])])
    (out / "entities.json").write_text(json.dumps(res.entities, indent=1) + "\n")
    if dump_signals:
        with open(out / "signals.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "slot", "bus", "rho", "varrho", "lambda", "gamma"])
            for rec in res.trace:
                for b, bus in enumerate(res.bus_ids):
                    w.writerow([rec.k, rec.slot, bus, _fmt(rec.rho[b]), _fmt(rec.varrho[b]),
                                _fmt(rec.lam[b]), _fmt(rec.gam[b])])
    summ = summary(res)
    jsonschema.validate(_jsonable(summ), schema("summary"))
    (out / "summary.json").write_text(json.dumps(_jsonable(summ), indent=1, sort_keys=True) + "\n")
    timing = {"wall_time": [s.wall_time for s in res.slots]}
    (out / "timing.json").write_text(json.dumps(timing, indent=1) + "\n")
    return summ


def _jsonable(obj):
    """Replace non-finite floats by ``None`` so the JSON stays standard."""
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def read_outputs(out: str | Path) -> tuple[dict, list[dict], list[int], list[dict], dict]:
    """Load ``committed.csv``, ``entities.json`` and ``slots.csv`` back into arrays."""
    out = Path(out)
    with open(out / "committed.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    slots_n = max(int(r["slot"]) for r in rows)
    bus_ids: list[int] = []
    for r in rows:
        b = int(r["bus"])
        if b not in bus_ids:
            bus_ids.append(b)
    pos = {b: i for i, b in enumerate(bus_ids)}
    com = {k: np.zeros((len(bus_ids), slots_n)) for k in _COMMITTED_KEYS}
    col = dict(zip(_COMMITTED_KEYS, COMMITTED_COLUMNS[3:]))
    for r in rows:
        i, t = pos[int(r["bus"])], int(r["slot"]) - 1
        for k in _COMMITTED_KEYS:
            com[k][i, t] = float(r[col[k]])
    entities = json.loads((out / "entities.json").read_text())
    with open(out / "slots.csv", newline="") as fh:
        slots = [{"slot": int(r["slot"]), "iterations": int(r["iterations"]),
                  "converged": bool(int(r["converged"])), "residual": float(r["residual"])}
                 for r in csv.DictReader(fh)]
    prev = json.loads((out / "summary.json").read_text()) if (out / "summary.json").exists() else {}
    return com, entities, bus_ids, slots, prev


def report(out: str | Path) -> dict:
    """Recompute the summary of a finished run from its output files alone."""
    com, entities, bus_ids, slots, prev = read_outputs(out)
    m = metrics_from_committed(com, entities, bus_ids, slots)
    summ = {
        "scenario": prev.get("scenario", ""), "mode": prev.get("mode", ""), "seed": prev.get("seed", 0),
        "horizon": com["p"].shape[1], "converged": bool(all(m["converged"])),
        "iterations": m["iterations"], "max_residual": m["max_residual"], "profit": m["profit"],
        "par": m["par"], "peak_demand": m["peak_demand"],
        "dominance_violations": prev.get("dominance_violations", 0),
    }
    return _jsonable(summ)
