"""Appliance models: constraint sets, utilities and sleeping-load estimates.

Three appliance types are supported:

* type 1 runs only inside its scheduling window and must draw a total energy
  within ``[E_min, E_max]``; utility depends on the total only;
* type 2 prefers its window (full utility there, energy band applies) and may
  run outside it at a low utility weight;
* type 3 is like type 2 without the energy band.

Scenario files describe appliance *classes* (:class:`ApplianceSpec`) with a
unit count and a wake-time distribution. A class instantiated at a concrete
wake slot is an :class:`Appliance` with an absolute scheduling window. Slots
are 1-based throughout, matching the horizon ``1..H``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

KERNELS = {"log1p": 0, "sqrt_shift": 1}
SQRT_EPS = 1e-6
PROB_TOL = 1e-12


class ApplianceInfeasible(ValueError):
    """Raised when an appliance's constraint set is empty."""


class CertaintyExhausted(ValueError):
    """Raised when conditioning on "still asleep" leaves no probability mass."""


def kernel_value(x, kernel: str = "log1p"):
    """Concave utility kernel, extended linearly below zero.

    ``log1p`` is ``ln(1+x)``; ``sqrt_shift`` is ``sqrt(x+eps) - sqrt(eps)``.
    For ``x < 0`` both use ``f(0) + f'(0) x`` so iterates slightly outside the
    feasible set still get a finite, concave value.
    """
    x = np.asarray(x, dtype=float)
    xp = np.maximum(x, 0.0)
    xn = np.minimum(x, 0.0)
    if kernel == "log1p":
        return np.log1p(xp) + xn
    if kernel == "sqrt_shift":
        return np.sqrt(xp + SQRT_EPS) - math.sqrt(SQRT_EPS) + xn * (0.5 / math.sqrt(SQRT_EPS))
    raise ValueError(f"unknown utility kernel {kernel!r}")


def kernel_grad(x, kernel: str = "log1p"):
    x = np.asarray(x, dtype=float)
    xp = np.maximum(x, 0.0)
    if kernel == "log1p":
        return 1.0 / (1.0 + xp)
    if kernel == "sqrt_shift":
        return 0.5 / np.sqrt(xp + SQRT_EPS)
    raise ValueError(f"unknown utility kernel {kernel!r}")


def _per_offset(value, length: int, name: str) -> tuple[float, ...]:
    if np.ndim(value) == 0:
        return tuple(float(value) for _ in range(length))
    vals = tuple(float(v) for v in value)
    if len(vals) != length:
        raise ValueError(f"{name} has {len(vals)} entries, expected window_length={length}")
    return vals


@dataclass(frozen=True)
class ApplianceSpec:
    """Appliance class as written in a scenario file.

    The scheduling window opens ``window_offset`` slots after the wake slot
    and lasts ``window_length`` slots. Per-slot bounds may be scalars or one
    value per window slot. ``kappa_profile``/``kappa_out_profile`` override
    the scalar weights per absolute slot (type 2 time preference).
    ``wake_prob[h-1]`` is the probability of waking at slot ``h``; any mass
    missing from the total means the unit may never wake.
    """

    id: str
    type: int
    wake_prob: tuple[float, ...]
    e_min: float | tuple[float, ...]
    e_max: float | tuple[float, ...]
    e_nom: float
    E_nom: float
    kappa: float
    count: int = 1
    window_offset: int = 0
    window_length: int = 1
    E_min: float | None = None
    E_max: float | None = None
    kappa_out: float = 0.0
    kappa_profile: tuple[float, ...] | None = None
    kappa_out_profile: tuple[float, ...] | None = None
    kernel: str = "log1p"
    e_out_max: float | None = None

    @property
    def duration(self) -> int:
        """Nominal run length in slots, ``ceil(E_nom / e_nom)``."""
        return int(math.ceil(self.E_nom / self.e_nom - 1e-12))

    def out_cap(self) -> float:
        if self.e_out_max is not None:
            return float(self.e_out_max)
        return float(max(_per_offset(self.e_max, self.window_length, "e_max")))

    def validate(self, horizon: int) -> None:
        where = f"appliance {self.id!r}"
        if self.type not in (1, 2, 3):
            raise ValueError(f"{where}: type must be 1, 2 or 3")
        if self.kernel not in KERNELS:
            raise ValueError(f"{where}: unknown kernel {self.kernel!r}")
        if self.count < 0:
            raise ValueError(f"{where}: count must be nonnegative")
        if self.window_length < 1 or self.window_offset < 0:
            raise ValueError(f"{where}: window must have offset >= 0 and length >= 1")
        lo = _per_offset(self.e_min, self.window_length, f"{where} e_min")
        hi = _per_offset(self.e_max, self.window_length, f"{where} e_max")
        if any(a > b for a, b in zip(lo, hi)) or min(lo) < 0.0:
            raise ValueError(f"{where}: need 0 <= e_min(h) <= e_max(h)")
        if self.type in (1, 2):
            if self.E_min is None or self.E_max is None:
                raise ValueError(f"{where}: types 1 and 2 need E_min and E_max")
            if self.E_min > self.E_max:
                raise ValueError(f"{where}: E_min > E_max")
        elif self.E_min is not None or self.E_max is not None:
            raise ValueError(f"{where}: type 3 carries no total-energy bounds")
        if self.e_nom <= 0.0 or self.E_nom <= 0.0:
            raise ValueError(f"{where}: e_nom and E_nom must be positive")
        if len(self.wake_prob) != horizon:
            raise ValueError(f"{where}: wake_prob needs {horizon} entries")
        p = np.asarray(self.wake_prob, dtype=float)
        if np.any(p < 0.0) or p.sum() > 1.0 + 1e-9:
            raise ValueError(f"{where}: wake_prob must be nonnegative with total <= 1")
        if self.kappa < 0.0 or self.kappa_out < 0.0:
            raise ValueError(f"{where}: utility weights must be nonnegative")
        for name in ("kappa_profile", "kappa_out_profile"):
            prof = getattr(self, name)
            if prof is not None:
                if len(prof) != horizon or min(prof) < 0.0:
                    raise ValueError(f"{where}: {name} needs {horizon} nonnegative entries")
        if self.type in (2, 3) and self.kappa_out > 0.1 * self.kappa:
            warnings.warn(f"{where}: kappa_out exceeds 0.1*kappa; out-of-window use is "
                          "meant to be much less valuable", stacklevel=2)

    def instantiate(self, wake: int, horizon: int) -> "Appliance":
        """The appliance of this class that wakes at slot ``wake``."""
        first = wake + self.window_offset
        last = min(first + self.window_length - 1, horizon)
        window = tuple(range(first, last + 1)) if first <= horizon else ()
        lo = np.zeros(horizon)
        hi = np.zeros(horizon)
        blo = _per_offset(self.e_min, self.window_length, "e_min")
        bhi = _per_offset(self.e_max, self.window_length, "e_max")
        for i, h in enumerate(window):
            lo[h - 1] = blo[i]
            hi[h - 1] = bhi[i]
        kap = np.full(horizon, float(self.kappa))
        if self.kappa_profile is not None:
            kap = np.asarray(self.kappa_profile, dtype=float)
        kout = np.full(horizon, float(self.kappa_out))
        if self.kappa_out_profile is not None:
            kout = np.asarray(self.kappa_out_profile, dtype=float)
        return Appliance(
            id=self.id, type=self.type, wake=wake, horizon_length=horizon, window=window,
            e_min=lo, e_max=hi, E_min=self.E_min, E_max=self.E_max,
            e_nom=self.e_nom, E_nom=self.E_nom, kappa=kap, kappa_out=kout,
            kernel=self.kernel, e_out_max=self.out_cap(),
        )


@dataclass(frozen=True, eq=False)
class Appliance:
    """One appliance with an absolute scheduling window.

    Arrays are indexed by ``slot - 1`` over the whole day; ``e_min``/``e_max``
    are meaningful on the window only. ``kappa`` is the in-window weight (the
    type 1 weight is read from the first window slot) and ``kappa_out`` the
    out-of-window weight.
    """

    id: str
    type: int
    wake: int
    horizon_length: int
    window: tuple[int, ...]
    e_min: np.ndarray
    e_max: np.ndarray
    E_min: float | None
    E_max: float | None
    e_nom: float
    E_nom: float
    kappa: np.ndarray
    kappa_out: np.ndarray
    kernel: str = "log1p"
    e_out_max: float = 0.0

    @classmethod
    def make(cls, id: str, type: int, window: Iterable[int], horizon: int, e_min: float,
             e_max: float, E_min: float | None = None, E_max: float | None = None,
             kappa: float = 1.0, kappa_out: float = 0.0, e_nom: float | None = None,
             E_nom: float | None = None, kernel: str = "log1p", wake: int | None = None,
             e_out_max: float | None = None) -> "Appliance":
        """Direct constructor with scalar bounds, mostly for tests and tooling."""
        window = tuple(sorted(window))
        lo = np.zeros(horizon)
        hi = np.zeros(horizon)
        for h in window:
            lo[h - 1] = e_min
            hi[h - 1] = e_max
        return cls(id=id, type=type, wake=window[0] if wake is None else wake,
                   horizon_length=horizon, window=window, e_min=lo, e_max=hi,
                   E_min=E_min, E_max=E_max, e_nom=e_max if e_nom is None else e_nom,
                   E_nom=(E_max if E_max is not None else e_max) if E_nom is None else E_nom,
                   kappa=np.full(horizon, float(kappa)), kappa_out=np.full(horizon, float(kappa_out)),
                   kernel=kernel, e_out_max=e_max if e_out_max is None else e_out_max)

    @property
    def duration(self) -> int:
        return int(math.ceil(self.E_nom / self.e_nom - 1e-12))

    @property
    def window_end(self) -> int:
        return self.window[-1] if self.window else self.wake - 1

    def finished(self, t: int) -> bool:
        """True once no slot ``>= t`` can carry consumption that matters."""
        if self.type == 1:
            return t > self.window_end
        return t > self.horizon_length

    def in_window(self, slots: np.ndarray) -> np.ndarray:
        if not self.window:
            return np.zeros(len(slots), dtype=bool)
        return (slots >= self.window[0]) & (slots <= self.window[-1])

    def nominal_profile(self) -> np.ndarray:
        """Uncontrolled operation: ``e_nom`` for ``duration`` slots from waking."""
        prof = np.zeros(self.horizon_length)
        start = self.wake - 1
        prof[start:start + self.duration] = self.e_nom
        return prof


@dataclass(frozen=True)
class FeasibleSet:
    """Box per slot plus an optional band on the in-window total, over ``slots``."""

    appliance_id: str
    slots: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    inmask: np.ndarray
    band_lo: float
    band_hi: float

    def contains(self, e: np.ndarray, tol: float = 1e-9) -> bool:
        e = np.asarray(e, dtype=float)
        if np.any(e < self.lo - tol) or np.any(e > self.hi + tol):
            return False
        s = float(e[self.inmask].sum())
        return self.band_lo - tol <= s <= self.band_hi + tol

    @property
    def is_singleton(self) -> bool:
        if np.any(self.hi > self.lo):
            return False
        return True


def feasible_set(app: Appliance, t: int, consumed: float = 0.0,
                 fixed: np.ndarray | None = None) -> FeasibleSet:
    """Constraint set of ``app`` over slots ``t..H``.

    ``consumed`` is the energy already committed inside the window; the band
    applies to what remains. Slots before the wake slot are pinned to zero.
    ``fixed`` (a day-long profile) pins every slot, which is how uncontrolled
    operation is represented.
    """
    H = app.horizon_length
    slots = np.arange(t, H + 1)
    idx = slots - 1
    inm = app.in_window(slots)
    lo = np.where(inm, app.e_min[idx], 0.0)
    hi = np.where(inm, app.e_max[idx], 0.0)
    if app.type in (2, 3):
        hi = np.where(inm, hi, app.e_out_max)
    hi = np.where(slots < app.wake, 0.0, hi)
    lo = np.where(slots < app.wake, 0.0, lo)
    if app.type == 3:
        blo, bhi = -np.inf, np.inf
    else:
        blo, bhi = app.E_min - consumed, app.E_max - consumed
    if fixed is not None:
        lo = hi = np.asarray(fixed, dtype=float)[idx].copy()
        blo, bhi = -np.inf, np.inf
    s_lo = float(lo[inm].sum())
    s_hi = float(hi[inm].sum())
    if max(blo, s_lo) > min(bhi, s_hi) + 1e-9 * (1.0 + abs(min(bhi, s_hi))):
        raise ApplianceInfeasible(
            f"appliance {app.id!r} (wake {app.wake}): energy band [{blo:g}, {bhi:g}] "
            f"cannot be met within per-slot bounds totalling [{s_lo:g}, {s_hi:g}]")
    return FeasibleSet(app.id, slots, lo, hi, inm, float(blo), float(bhi))


def utility(app: Appliance, profile: np.ndarray, t: int = 1, consumed: float = 0.0) -> float:
    """Utility of one unit running ``profile`` over slots ``t..H``.

    For type 1 the argument of the kernel is the whole-window energy, i.e.
    ``consumed`` plus the in-window part of ``profile``, minus ``E_min``.
    """
    profile = np.asarray(profile, dtype=float)
    slots = np.arange(t, app.horizon_length + 1)
    idx = slots - 1
    inm = app.in_window(slots)
    if app.type == 1:
        k = float(app.kappa[app.window[0] - 1]) if app.window else 0.0
        return float(k * kernel_value(consumed + profile[inm].sum() - app.E_min, app.kernel))
    val = np.where(inm, app.kappa[idx] * kernel_value(profile - app.e_min[idx], app.kernel),
                   app.kappa_out[idx] * kernel_value(profile, app.kernel))
    val = np.where(slots < app.wake, 0.0, val)
    return float(val.sum())


@dataclass(frozen=True)
class WakeProbabilityTable:
    """Wake-time distributions and nominal run parameters per appliance class."""

    prob: Mapping[str, np.ndarray]
    duration: Mapping[str, int]
    e_nom: Mapping[str, float]
    _cum: dict = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def from_specs(cls, specs: Iterable[ApplianceSpec]) -> "WakeProbabilityTable":
        specs = list(specs)
        return cls(prob={s.id: np.asarray(s.wake_prob, dtype=float) for s in specs},
                   duration={s.id: s.duration for s in specs},
                   e_nom={s.id: float(s.e_nom) for s in specs})

    def remaining_mass(self, appliance_id: str, t: int) -> float:
        """``1 - sum_{h<=t} p(h)``, the mass left for a unit still asleep after ``t``."""
        p = self.prob[appliance_id]
        return 1.0 - float(p[:max(t, 0)].sum())


def conditional_wake_prob(table: WakeProbabilityTable, appliance_id: str, h: int, t: int) -> float:
    """Probability of waking at ``h`` given the unit is still asleep after slot ``t``."""
    if h <= t:
        raise ValueError(f"need h > t, got h={h}, t={t}")
    denom = table.remaining_mass(appliance_id, t)
    if denom <= PROB_TOL:
        raise CertaintyExhausted(
            f"appliance {appliance_id!r}: no wake probability left after slot {t}; "
            "it must already be awake")
    return float(table.prob[appliance_id][h - 1]) / denom


def sleeping_load_profile(table: WakeProbabilityTable, asleep: Mapping[str, int], t: int,
                          horizon: int) -> np.ndarray:
    """Worst-case expected demand of sleeping units over slots ``t..H``.

    Entry ``h`` sums ``e_nom * P(unit operating at h | asleep after t)`` where a
    unit operates for ``duration`` slots from its wake slot. Slot ``t`` itself
    gets zero: a unit asleep now draws nothing this slot.
    """
    out = np.zeros(horizon - t + 1)
    for aid, count in asleep.items():
        if count <= 0:
            continue
        denom = table.remaining_mass(aid, t)
        if denom <= PROB_TOL:
            raise CertaintyExhausted(
                f"appliance {aid!r}: {count} unit(s) asleep after slot {t} with no "
                "wake probability left")
        p = table.prob[aid]
        cond = np.zeros(horizon + 1)
        cond[t + 1:] = p[t:] / denom
        csum = np.cumsum(cond)
        dur = table.duration[aid]
        for h in range(t + 1, horizon + 1):
            lo = max(t + 1, h - dur + 1)
            out[h - t] += count * table.e_nom[aid] * (csum[h] - csum[lo - 1])
    return out


def sleeping_load_estimate(table: WakeProbabilityTable, asleep: Mapping[str, int] | Iterable[str],
                           h: int, t: int) -> float:
    """Worst-case expected demand at slot ``h > t`` of the units still asleep."""
    if h <= t:
        raise ValueError(f"need h > t, got h={h}, t={t}")
    if not isinstance(asleep, Mapping):
        counts: dict[str, int] = {}
        for aid in asleep:
            counts[aid] = counts.get(aid, 0) + 1
        asleep = counts
    total = 0.0
    for aid, count in asleep.items():
        if count <= 0:
            continue
        dur = table.duration[aid]
        acc = 0.0
        for hp in range(max(t + 1, h - dur + 1), h + 1):
            acc += conditional_wake_prob(table, aid, hp, t)
        total += count * table.e_nom[aid] * acc
    return total
