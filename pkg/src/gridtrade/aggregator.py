"""Load-aggregator agent.

An aggregator manages *cohorts*: groups of identical appliance units (same
class, same wake slot) that face identical prices and therefore share one
per-unit decision. Units that have not woken yet are represented only by the
worst-case sleeping-load estimate, which is price-inelastic.

The local problem, maximizing utility minus payment for active power at the
posted prices, separates across cohorts. :func:`local_solve` solves it exactly
through the batched kernel (``method="kkt"``) or by projected gradient ascent
(``method="pga"``), which is kept as an independent cross-check.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from gridtrade import kernels
from gridtrade.appliance import (KERNELS, Appliance, ApplianceSpec, WakeProbabilityTable,
                                 feasible_set, kernel_grad, kernel_value, sleeping_load_profile)

MODES = ("uncertainty", "complete", "benchmark")


class AgentSolveError(RuntimeError):
    """Local solver failure, tagged with the agent's bus."""

    def __init__(self, message: str, bus: int | None = None, residual: float | None = None):
        super().__init__(message if bus is None else f"agent at bus {bus}: {message}")
        self.bus = bus
        self.residual = residual


@dataclass
class Cohort:
    """``count`` units of one appliance class that woke at the same slot.

    ``profile`` is the current per-unit decision as a day-long array; only
    entries ``>= t`` are decision variables at slot ``t``. ``committed``
    holds what was actually consumed in past slots and ``consumed`` the part
    of it that fell inside the scheduling window.
    """

    spec: ApplianceSpec
    app: Appliance
    count: int
    profile: np.ndarray
    committed: np.ndarray
    consumed: float = 0.0
    fixed: bool = False

    @property
    def key(self) -> tuple[str, int]:
        return (self.app.id, self.app.wake)

    def feasible(self, t: int):
        fixed = self.app.nominal_profile() if self.fixed else None
        return feasible_set(self.app, t, self.consumed, fixed)


@dataclass
class AggregatorState:
    """Aggregator bookkeeping across slots.

    ``asleep`` counts sleeping units per appliance class. In complete-information
    mode every cohort is known from the start and ``asleep`` stays empty; in
    benchmark mode cohorts are pinned to their nominal profile.
    """

    bus: int
    power_factor: float
    specs: tuple[ApplianceSpec, ...]
    horizon: int
    mode: str = "uncertainty"
    asleep: dict[str, int] = field(default_factory=dict)
    cohorts: list[Cohort] = field(default_factory=list)
    retired: list[Cohort] = field(default_factory=list)
    prices: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if not (0.0 < self.power_factor <= 1.0):
            raise ValueError("power factor must lie in (0, 1]")
        self.table = WakeProbabilityTable.from_specs(self.specs)
        self._by_id = {s.id: s for s in self.specs}

    @classmethod
    def create(cls, bus: int, power_factor: float, specs: Sequence[ApplianceSpec], horizon: int,
               mode: str = "uncertainty") -> "AggregatorState":
        specs = tuple(specs)
        asleep = {s.id: s.count for s in specs} if mode != "complete" else {}
        return cls(bus, power_factor, specs, horizon, mode, asleep)

    @property
    def reactive_factor(self) -> float:
        pf = self.power_factor
        return float(np.sqrt(max(1.0 - pf * pf, 0.0) / (pf * pf)))

    @property
    def awake(self) -> dict[tuple[str, int], int]:
        return {c.key: c.count for c in self.cohorts}

    def all_cohorts(self) -> list[Cohort]:
        return self.retired + self.cohorts

    def add_cohort(self, spec_id: str, wake: int, count: int, rng: np.random.Generator | None = None,
                   t: int | None = None) -> Cohort:
        spec = self._by_id[spec_id]
        app = spec.instantiate(wake, self.horizon)
        fixed = self.mode == "benchmark"
        coh = Cohort(spec, app, int(count), np.zeros(self.horizon), np.zeros(self.horizon), 0.0, fixed)
        start = wake if t is None else max(t, 1)
        coh.profile = initial_profile(coh, start, rng)
        self.cohorts.append(coh)
        return coh


def initial_profile(coh: Cohort, t: int, rng: np.random.Generator | None) -> np.ndarray:
    """Uniform draw inside the box, moved onto the energy band (or the nominal profile when pinned)."""
    fs = coh.feasible(t)
    prof = coh.profile.copy()
    if rng is None:
        z = 0.5 * (fs.lo + fs.hi)
    else:
        z = fs.lo + rng.random(fs.lo.shape) * (fs.hi - fs.lo)
    e = kernels.project_box_band(z[None, :], fs.lo[None, :], fs.hi[None, :],
                                 fs.inmask[None, :].astype(np.uint8),
                                 np.array([fs.band_lo]), np.array([fs.band_hi]))[0]
    prof[t - 1:] = e
    return prof


def wake_step(state: AggregatorState, t: int, events: Mapping[str, int] | None = None,
              rng: np.random.Generator | None = None) -> AggregatorState:
    """Apply slot-``t`` wake events and retire cohorts that can no longer act.

    Parameters
    ----------
    events : mapping of appliance class id to the number of units waking at ``t``.
        Ignored in complete-information mode, where cohorts are registered up front.

    Raises
    ------
    KeyError
        Unknown appliance class.
    ValueError
        More units woke than are asleep.
    """
    if events and state.mode != "complete":
        for aid, n in sorted(events.items()):
            if aid not in state._by_id:
                raise KeyError(f"aggregator at bus {state.bus}: unknown appliance {aid!r}")
            if n <= 0:
                continue
            if n > state.asleep.get(aid, 0):
                raise ValueError(f"aggregator at bus {state.bus}: {n} units of {aid!r} woke at "
                                 f"slot {t} but only {state.asleep.get(aid, 0)} are asleep")
            state.asleep[aid] -= n
            state.add_cohort(aid, t, n, rng, t)
    live, done = [], []
    for c in state.cohorts:
        over = c.app.finished(t)
        if c.fixed:
            over = over and t >= c.app.wake + c.app.duration
        (done if over else live).append(c)
    state.cohorts = live
    state.retired.extend(done)
    return state


def sleeping_profile(state: AggregatorState, t: int) -> np.ndarray:
    """Worst-case expected demand of the sleeping units over ``t..H`` (zero in slot ``t``)."""
    if not state.asleep:
        return np.zeros(state.horizon - t + 1)
    return sleeping_load_profile(state.table, state.asleep, t, state.horizon)


def demand_profile(state: AggregatorState, t: int, sleeping: np.ndarray | None = None
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Active and reactive demand ``(l, q)`` over slots ``t..H``."""
    load = sleeping_profile(state, t) if sleeping is None else np.array(sleeping, dtype=float)
    for c in state.cohorts:
        load += c.count * c.profile[t - 1:]
    return load, load * state.reactive_factor


@dataclass
class CohortBatch:
    """Per-unit constraint and utility data of many cohorts over slots ``t..H``, shape ``(K, T)``."""

    t: int
    lo: np.ndarray
    hi: np.ndarray
    inmask: np.ndarray
    kappa: np.ndarray
    shift: np.ndarray
    band_lo: np.ndarray
    band_hi: np.ndarray
    ctype: np.ndarray
    offset: np.ndarray
    kid: np.ndarray
    counts: np.ndarray
    fixed: np.ndarray

    @property
    def size(self) -> int:
        return self.lo.shape[0]

    @property
    def T(self) -> int:
        return self.lo.shape[1]

    def subset(self, rows) -> "CohortBatch":
        rows = np.asarray(rows, dtype=int)
        return CohortBatch(self.t, *(getattr(self, f)[rows] for f in
                                     ("lo", "hi", "inmask", "kappa", "shift", "band_lo", "band_hi",
                                      "ctype", "offset", "kid", "counts", "fixed")))

    def _rows(self, kid: int):
        return self.kid == kid

    def unit_utility(self, E: np.ndarray) -> np.ndarray:
        """Per-unit utility of each row."""
        E = np.asarray(E, dtype=float)
        out = np.zeros(self.size)
        for name, kid in KERNELS.items():
            rows = self._rows(kid)
            if not rows.any():
                continue
            t1 = rows & (self.ctype == 1)
            sep = rows & (self.ctype != 1)
            if t1.any():
                tot = (E[t1] * self.inmask[t1]).sum(axis=1) + self.offset[t1]
                out[t1] = self.kappa[t1, 0] * kernel_value(tot, name)
            if sep.any():
                out[sep] = (self.kappa[sep] * kernel_value(E[sep] - self.shift[sep], name)).sum(axis=1)
        return out

    def utility(self, E: np.ndarray) -> float:
        return float((self.counts * self.unit_utility(E)).sum())

    def unit_gradient(self, E: np.ndarray) -> np.ndarray:
        """Gradient of each row's per-unit utility."""
        E = np.asarray(E, dtype=float)
        g = np.zeros_like(E)
        for name, kid in KERNELS.items():
            rows = self._rows(kid)
            if not rows.any():
                continue
            t1 = rows & (self.ctype == 1)
            sep = rows & (self.ctype != 1)
            if t1.any():
                tot = (E[t1] * self.inmask[t1]).sum(axis=1) + self.offset[t1]
                g[t1] = (self.kappa[t1, 0] * kernel_grad(tot, name))[:, None] * self.inmask[t1]
            if sep.any():
                g[sep] = self.kappa[sep] * kernel_grad(E[sep] - self.shift[sep], name)
        return g

    def project(self, Z: np.ndarray) -> np.ndarray:
        if self.size == 0:
            return np.zeros((0, self.T))
        return kernels.project_box_band(np.ascontiguousarray(Z, dtype=float), self.lo, self.hi,
                                        self.inmask, self.band_lo, self.band_hi)

    def best_response(self, price: np.ndarray, prev: np.ndarray | None = None,
                      tau: float = 0.0) -> np.ndarray:
        """Exact per-unit maximizer of ``U(e) - price . e`` for every row.

        With ``prev`` and ``tau > 0`` the type-1 rows instead maximize
        ``U(e) - price . e - |e - prev|^2 / (2 tau)``. Their utility depends
        on the total only, so the plain response jumps between slots on tiny
        price differences; the proximal term makes it continuous and leaves
        the fixed points (``e == prev``) those of the plain response.
        """
        if self.size == 0:
            return np.zeros((0, self.T))
        P = np.array(np.broadcast_to(price, self.lo.shape), dtype=float)
        E = kernels.solve_cohorts(P, self.lo, self.hi, self.inmask, self.kappa, self.shift,
                                  self.band_lo, self.band_hi, self.ctype, self.offset, self.kid)
        if prev is not None and tau > 0.0:
            t1 = np.flatnonzero(self.ctype == 1)
            if t1.size:
                E[t1] = kernels.solve_type1_prox(
                    P[t1], self.lo[t1], self.hi[t1], self.inmask[t1], self.kappa[t1, 0],
                    self.band_lo[t1], self.band_hi[t1], self.offset[t1], self.kid[t1],
                    np.ascontiguousarray(prev[t1], dtype=float), float(tau))
        pinned = self.fixed.astype(bool)
        if pinned.any():
            E[pinned] = self.lo[pinned]
        return E


def build_batch(cohorts: Sequence[Cohort], t: int) -> CohortBatch:
    """Stack the feasible sets and utility data of ``cohorts`` at slot ``t``."""
    K = len(cohorts)
    H = cohorts[0].app.horizon_length if K else t
    T = H - t + 1
    lo = np.zeros((K, T)); hi = np.zeros((K, T))
    inm = np.zeros((K, T), dtype=np.uint8)
    kap = np.zeros((K, T)); shift = np.zeros((K, T))
    blo = np.zeros(K); bhi = np.zeros(K)
    ctype = np.zeros(K, dtype=np.int64); off = np.zeros(K)
    kid = np.zeros(K, dtype=np.int64); counts = np.zeros(K)
    fixed = np.zeros(K, dtype=np.uint8)
    for r, c in enumerate(cohorts):
        app = c.app
        fs = c.feasible(t)
        idx = fs.slots - 1
        lo[r], hi[r] = fs.lo, fs.hi
        inm[r] = fs.inmask
        blo[r], bhi[r] = fs.band_lo, fs.band_hi
        ctype[r] = app.type
        kid[r] = KERNELS[app.kernel]
        counts[r] = c.count
        fixed[r] = c.fixed
        if app.type == 1:
            k1 = float(app.kappa[app.window[0] - 1]) if app.window else 0.0
            kap[r] = k1
            off[r] = c.consumed - app.E_min
        else:
            kap[r] = np.where(fs.inmask, app.kappa[idx], app.kappa_out[idx])
            shift[r] = np.where(fs.inmask, app.e_min[idx], 0.0)
            before = fs.slots < app.wake
            kap[r, before] = 0.0
    return CohortBatch(t, lo, hi, inm, kap, shift, blo, bhi, ctype, off, kid, counts, fixed)


def stationarity_residual(batch: CohortBatch, E: np.ndarray, price) -> float:
    """``max |E - Proj(E + grad)|`` of the per-unit problems (zero exactly at optimality)."""
    if batch.size == 0:
        return 0.0
    g = batch.unit_gradient(E) - np.broadcast_to(price, E.shape)
    free = ~batch.fixed.astype(bool)
    r = np.abs(E - batch.project(E + g))
    return float(r[free].max()) if free.any() else 0.0


def solve_pga(batch: CohortBatch, price, E0: np.ndarray | None = None, step: float = 1.0,
              max_iter: int = 5000, tol: float = 1e-6) -> tuple[np.ndarray, float, int]:
    """Projected gradient ascent with step ``step / sqrt(k)``.

    Returns the iterate, its stationarity residual and the iterations used.
    """
    price = np.broadcast_to(price, (batch.size, batch.T))
    E = batch.project(batch.lo if E0 is None else E0)
    res = stationarity_residual(batch, E, price)
    k = 0
    while res > tol and k < max_iter:
        k += 1
        g = batch.unit_gradient(E) - price
        E = batch.project(E + (step / np.sqrt(k)) * g)
        res = stationarity_residual(batch, E, price)
    return E, res, k


def local_solve(state: AggregatorState, prices, t: int, method: str = "kkt",
                max_iter: int = 5000, tol: float = 1e-6, step: float = 1.0) -> list[np.ndarray]:
    """Profit-maximizing per-unit profiles of every awake cohort at prices ``rho`` over ``t..H``.

    Updates ``state.cohorts[*].profile`` and ``state.prices`` in place and
    returns the new profiles (slots ``t..H``).

    Raises
    ------
    AgentSolveError
        Infeasible cohort or, for ``"pga"``, no convergence within ``max_iter``.
    """
    prices = np.asarray(prices, dtype=float)
    state.prices = prices.copy()
    if not state.cohorts:
        return []
    try:
        batch = build_batch(state.cohorts, t)
    except ValueError as exc:
        raise AgentSolveError(str(exc), state.bus) from None
    if method == "kkt":
        try:
            E = batch.best_response(prices)
        except ValueError as exc:
            raise AgentSolveError(str(exc), state.bus) from None
    elif method == "pga":
        E0 = np.vstack([c.profile[t - 1:] for c in state.cohorts])
        E, res, _ = solve_pga(batch, prices, E0, step, max_iter, tol)
        if res > tol:
            raise AgentSolveError(f"projected gradient stopped at residual {res:.3e}", state.bus, res)
    else:
        raise ValueError(f"unknown method {method!r}")
    out = []
    for c, e in zip(state.cohorts, E):
        c.profile[t - 1:] = e
        out.append(e)
    return out


def profit(state: AggregatorState, prices, t: int, sleeping: np.ndarray | None = None,
           profiles: Sequence[np.ndarray] | None = None) -> float:
    """Utility of the awake cohorts minus the payment ``sum_h l(h) rho(h)`` over ``t..H``."""
    prices = np.asarray(prices, dtype=float)
    if profiles is None:
        profiles = [c.profile[t - 1:] for c in state.cohorts]
    load = sleeping_profile(state, t) if sleeping is None else np.array(sleeping, dtype=float)
    util = 0.0
    if state.cohorts:
        batch = build_batch(state.cohorts, t)
        E = np.vstack(profiles)
        util = batch.utility(E)
        load = load + (batch.counts[:, None] * E).sum(axis=0)
    return float(util - (load * prices).sum())


def nominal_continuation(state: AggregatorState, t: int) -> list[np.ndarray]:
    """Per-unit "run as soon as awake" profiles over ``t..H``, moved onto each feasible set.

    This is the uncontrolled schedule an aggregator without demand response
    would follow from the current state; it is the comparator for the
    profit-dominance check.
    """
    out = []
    for c in state.cohorts:
        fs = c.feasible(t)
        z = c.app.nominal_profile()[t - 1:]
        e = kernels.project_box_band(z[None, :], fs.lo[None, :], fs.hi[None, :],
                                     fs.inmask[None, :].astype(np.uint8),
                                     np.array([fs.band_lo]), np.array([fs.band_hi]))[0]
        out.append(e)
    return out


def commit(state: AggregatorState, t: int) -> float:
    """Freeze slot ``t`` of every awake cohort; returns the committed active demand of the units."""
    total = 0.0
    for c in state.cohorts:
        e = float(c.profile[t - 1])
        c.committed[t - 1] = e
        if c.app.in_window(np.array([t]))[0]:
            c.consumed += e
        total += c.count * e
    return total
