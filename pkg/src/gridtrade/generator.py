"""Generator agents: conventional dispatch plus robust renewable offers.

A generator sells conventional active power at a quadratic cost, reactive
power at no cost, and an offer of renewable power that it may bid anywhere
between the forecast lower and upper bounds. Bidding above the lower bound
exposes it to a shortage charge ``beta * (p_ren - p_min_ren)`` per slot, which
is how the operator prices the risk of the renewable falling short.

The profit problem separates across slots and every piece has a closed form,
so :func:`local_solve` is exact.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RenewableSpec:
    """Per-slot renewable forecast band (length ``H``) and the realized output."""

    kind: str
    p_min: tuple[float, ...]
    p_max: tuple[float, ...]
    p_actual: tuple[float, ...] | None = None

    def actual(self) -> np.ndarray:
        if self.p_actual is not None:
            return np.asarray(self.p_actual, dtype=float)
        return 0.5 * (np.asarray(self.p_min) + np.asarray(self.p_max))


@dataclass(frozen=True)
class GeneratorAsset:
    """Cost curve ``a2 p^2 + a1 p + a0`` per slot, limits, optional renewable."""

    bus: int
    a2: float
    a1: float
    a0: float
    p_min: float
    p_max: float
    q_min: float = 0.0
    q_max: float = 0.0
    renewable: RenewableSpec | None = None

    def validate(self, horizon: int) -> None:
        where = f"generator at bus {self.bus}"
        if self.a2 < 0.0:
            raise ValueError(f"{where}: a2 must be nonnegative (convex cost)")
        if self.p_min > self.p_max or self.q_min > self.q_max:
            raise ValueError(f"{where}: limits must satisfy min <= max")
        if self.renewable is not None:
            r = self.renewable
            lo, hi = np.asarray(r.p_min, float), np.asarray(r.p_max, float)
            if len(lo) != horizon or len(hi) != horizon:
                raise ValueError(f"{where}: renewable bounds need {horizon} entries")
            if np.any(lo < 0.0) or np.any(lo > hi):
                raise ValueError(f"{where}: renewable bounds need 0 <= p_min <= p_max")
            if r.p_actual is not None:
                act = np.asarray(r.p_actual, float)
                if len(act) != horizon or np.any(act < lo - 1e-12) or np.any(act > hi + 1e-12):
                    raise ValueError(f"{where}: renewable p_actual must lie in [p_min, p_max]")

    def renewable_bounds(self, slots: np.ndarray, exact: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Forecast band over ``slots`` (1-based); ``exact`` collapses it to the actual output."""
        idx = np.asarray(slots) - 1
        if self.renewable is None:
            z = np.zeros(len(idx))
            return z, z.copy()
        if exact:
            act = self.renewable.actual()[idx]
            return act.copy(), act.copy()
        return (np.asarray(self.renewable.p_min, float)[idx].copy(),
                np.asarray(self.renewable.p_max, float)[idx].copy())

    def cost(self, p_conv) -> np.ndarray:
        p = np.asarray(p_conv, dtype=float)
        return self.a2 * p * p + self.a1 * p + self.a0


@dataclass
class GeneratorDecision:
    """Per-slot decision over the remaining horizon, with the renewable band it used."""

    p_conv: np.ndarray
    q_conv: np.ndarray
    p_ren: np.ndarray
    ren_min: np.ndarray
    ren_max: np.ndarray
    confidence: float = 0.0

    @property
    def budget(self) -> float:
        """Attained left-hand side of the budget constraint."""
        return attained_budget(self.p_ren, self.ren_min, self.ren_max)

    def copy(self) -> "GeneratorDecision":
        return GeneratorDecision(self.p_conv.copy(), self.q_conv.copy(), self.p_ren.copy(),
                                 self.ren_min.copy(), self.ren_max.copy(), self.confidence)


def attained_budget(p_ren, ren_min, ren_max) -> float:
    """``sum_h (p_max - p) / (p_max - p_min)``; slots with no spread count as zero."""
    width = np.asarray(ren_max, float) - np.asarray(ren_min, float)
    live = width > 0.0
    if not np.any(live):
        return 0.0
    return float(((np.asarray(ren_max)[live] - np.asarray(p_ren)[live]) / width[live]).sum())


def shortage_cost(decision: GeneratorDecision, beta) -> float:
    """Worst-case shortage charge ``sum_h beta(h) (p_ren(h) - p_min_ren(h))``."""
    beta = np.broadcast_to(np.asarray(beta, dtype=float), decision.p_ren.shape)
    return float((beta * (decision.p_ren - decision.ren_min)).sum())


def profit(decision: GeneratorDecision, asset: GeneratorAsset, rho, varrho, beta) -> float:
    """Revenue from active and reactive sales minus cost and shortage charge."""
    rho = np.broadcast_to(np.asarray(rho, dtype=float), decision.p_conv.shape)
    varrho = np.broadcast_to(np.asarray(varrho, dtype=float), decision.p_conv.shape)
    revenue = ((decision.p_conv + decision.p_ren) * rho + decision.q_conv * varrho).sum()
    return float(revenue - asset.cost(decision.p_conv).sum() - shortage_cost(decision, beta))


def initial_decision(asset: GeneratorAsset, slots: np.ndarray, rng: np.random.Generator,
                     exact_renewable: bool = False) -> GeneratorDecision:
    """Random conventional output within limits; renewable at the upper bound, zero budget."""
    T = len(slots)
    lo, hi = asset.renewable_bounds(slots, exact_renewable)
    p_conv = rng.uniform(asset.p_min, asset.p_max, T) if asset.p_max > asset.p_min else np.full(T, asset.p_min)
    q_conv = rng.uniform(asset.q_min, asset.q_max, T) if asset.q_max > asset.q_min else np.full(T, asset.q_min)
    return GeneratorDecision(p_conv, q_conv, hi.copy(), lo, hi, 0.0)


def local_solve(asset: GeneratorAsset, rho, varrho, beta, slots: np.ndarray,
                budget: float | None = None, exact_renewable: bool = False) -> GeneratorDecision:
    """Profit-maximizing decision over ``slots`` at the posted prices.

    Parameters
    ----------
    rho, varrho, beta : array_like, shape (T,)
        Active price, reactive price and shortage penalty per slot.
    budget : float, optional
        Fixed confidence level. ``None`` lets the budget float: every slot
        independently offers the upper bound when ``rho > beta`` and the lower
        bound otherwise, and the attained budget is reported.
        With a fixed budget the offer deviates downward from the upper bound
        in the slots where it pays most, until the budget is spent.
    """
    slots = np.asarray(slots)
    T = len(slots)
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (T,))
    varrho = np.broadcast_to(np.asarray(varrho, dtype=float), (T,))
    beta = np.broadcast_to(np.asarray(beta, dtype=float), (T,))
    if asset.a2 > 0.0:
        p_conv = np.clip((rho - asset.a1) / (2.0 * asset.a2), asset.p_min, asset.p_max)
    else:
        # ties at rho == a1 go to the lower limit
        p_conv = np.where(rho > asset.a1, asset.p_max, asset.p_min).astype(float)
    q_conv = np.where(varrho > 0.0, asset.q_max, asset.q_min).astype(float)
    lo, hi = asset.renewable_bounds(slots, exact_renewable)
    if budget is None:
        p_ren = np.where(rho > beta, hi, lo)
        conf = attained_budget(p_ren, lo, hi)
    else:
        p_ren = hi.copy()
        width = hi - lo
        gain = (beta - rho) * width
        left = float(budget)
        for h in np.argsort(-gain, kind="stable"):
            if left <= 0.0 or gain[h] <= 0.0 or width[h] <= 0.0:
                continue
            d = min(1.0, left)
            p_ren[h] = lo[h] if d >= 1.0 else hi[h] - d * width[h]
            left -= d
        conf = float(budget)
    return GeneratorDecision(p_conv.astype(float), q_conv, p_ren.astype(float), lo, hi, conf)
