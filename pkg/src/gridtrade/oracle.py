"""Centralized reference solvers for the per-slot welfare problem.

The welfare problem of slot ``t`` maximizes total appliance utility minus
conventional cost minus ``vartheta`` times the voltage-drop risk, over every
agent's decision and the network state, subject to nodal balance through the
linear flow model, voltage bounds and branch polygons.

:func:`solve_central` uses an augmented Lagrangian on the balance rows. The
network state is eliminated in closed form for fixed injections: maximizing
``mu . r - (c/2) |r|^2`` over ``x`` in the network polytope is the projection
of ``A^+ (inj - a - mu / c)`` in the ``A^T A`` metric, so the inner problem is
a smooth concave program in the agent variables alone and is solved with
accelerated projected gradient (backtracking, adaptive restart).

:func:`brute_force` enumerates a grid at toy scale and is independent of all
of the above except the flow model itself.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gridtrade.aggregator import CohortBatch, stationarity_residual
from gridtrade.dno import Injections, NetworkOperator, risk
from gridtrade.linpf import solve_flow

MAX_GRID_POINTS = 10 ** 8


class OracleError(RuntimeError):
    pass


class InfeasibleProblem(OracleError):
    """No interior point was found, or the enumerated feasible set is empty."""


class OracleNonConvergence(OracleError):
    pass


class GridTooLarge(OracleError):
    pass


@dataclass
class CentralSolution:
    """Decisions, network state and multipliers of one slot problem over slots ``t..H``.

    ``E[i]`` holds the per-unit profiles of aggregator ``i``'s cohorts; the
    generator blocks are lists of length-``T`` arrays. ``lam``/``gam`` are
    ``None`` for enumerated solutions.
    """

    t: int
    E: list[np.ndarray]
    p_conv: list[np.ndarray]
    q_conv: list[np.ndarray]
    p_ren: list[np.ndarray]
    p: np.ndarray
    q: np.ndarray
    theta: np.ndarray
    v: np.ndarray
    lam: np.ndarray | None
    gam: np.ndarray | None
    objective: float
    residual: float = 0.0
    stationarity: float = 0.0
    iterations: int = 0
    outer: int = 0
    converged: bool = True
    grid_tolerance: float = 0.0
    info: dict = field(default_factory=dict)


# ---------------------------------------------------------------- the slot problem

class SlotModel:
    """Flat-vector view of the agent variables of a :class:`~gridtrade.market.SlotProblem`.

    The vector stacks, in order, each aggregator's per-unit cohort profiles
    and each generator's conventional active, conventional reactive and
    renewable power.
    """

    def __init__(self, problem):
        self.pb = problem
        self.op: NetworkOperator = problem.op
        self.T = problem.T
        T = self.T
        off = 0
        self.agg_slices = []
        for batch in problem.agg_batch:
            size = 0 if batch is None else batch.size * T
            self.agg_slices.append(slice(off, off + size))
            off += size
        self.gen_slices = []
        for _ in problem.gen_assets:
            self.gen_slices.append((slice(off, off + T), slice(off + T, off + 2 * T),
                                    slice(off + 2 * T, off + 3 * T)))
            off += 3 * T
        self.size = off
        beta = self.op.beta()
        self.gen_beta = [float(beta[pos]) for pos in problem.gen_pos]
        lo = np.full(off, -np.inf)
        hi = np.full(off, np.inf)
        for g, (sp, sq, sr) in enumerate(self.gen_slices):
            a = problem.gen_assets[g]
            lo[sp], hi[sp] = a.p_min, a.p_max
            lo[sq], hi[sq] = a.q_min, a.q_max
            lo[sr], hi[sr] = problem.ren_lo[g], problem.ren_hi[g]
        self.lo, self.hi = lo, hi

    # -- unpacking -------------------------------------------------------------
    def E(self, z: np.ndarray, i: int) -> np.ndarray:
        batch = self.pb.agg_batch[i]
        if batch is None:
            return np.zeros((0, self.T))
        return z[self.agg_slices[i]].reshape(batch.size, self.T)

    def gen(self, z: np.ndarray, j: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        sp, sq, sr = self.gen_slices[j]
        return z[sp], z[sq], z[sr]

    # -- feasible set ----------------------------------------------------------
    def project(self, z: np.ndarray) -> np.ndarray:
        out = np.clip(z, self.lo, self.hi)
        for i, batch in enumerate(self.pb.agg_batch):
            if batch is None or batch.size == 0:
                continue
            E = batch.project(self.E(z, i))
            pinned = batch.fixed.astype(bool)
            if pinned.any():
                E[pinned] = batch.lo[pinned]
            out[self.agg_slices[i]] = E.ravel()
        return out

    def start(self, rng: np.random.Generator | None = None) -> np.ndarray:
        """Mid-box point, or a uniform draw in the box when ``rng`` is given; projected."""
        z = np.zeros(self.size)
        for i, batch in enumerate(self.pb.agg_batch):
            if batch is None:
                continue
            u = 0.5 if rng is None else rng.uniform(size=batch.lo.shape)
            z[self.agg_slices[i]] = (batch.lo + u * (batch.hi - batch.lo)).ravel()
        fin = np.isfinite(self.lo) & np.isfinite(self.hi)
        u = 0.5 if rng is None else rng.uniform(size=int(fin.sum()))
        z[fin] = self.lo[fin] + u * (self.hi[fin] - self.lo[fin])
        return self.project(z)

    # -- injections ------------------------------------------------------------
    def injections(self, z: np.ndarray) -> Injections:
        n, T = self.op.n, self.T
        p = np.zeros((n, T)); q = np.zeros((n, T))
        ren = np.zeros((n, T)); ren_min = np.zeros((n, T))
        pb = self.pb
        for i, batch in enumerate(pb.agg_batch):
            load = pb.agg_sleep[i].copy()
            if batch is not None:
                load += batch.counts @ self.E(z, i)
            p[pb.agg_pos[i]] -= load
            q[pb.agg_pos[i]] -= load * pb.agg_react[i]
        for j, pos in enumerate(pb.gen_pos):
            pc, qc, pr = self.gen(z, j)
            p[pos] += pc + pr
            q[pos] += qc
            ren[pos] = pr
            ren_min[pos] = pb.ren_lo[j]
        return Injections(p, q, ren, ren_min, self.welfare(z))

    def inj_adjoint(self, gp: np.ndarray, gq: np.ndarray) -> np.ndarray:
        """Gradient in ``z`` of ``sum(gp * p + gq * q)``."""
        out = np.zeros(self.size)
        pb = self.pb
        for i, batch in enumerate(pb.agg_batch):
            if batch is None:
                continue
            pos = pb.agg_pos[i]
            w = -(gp[pos] + pb.agg_react[i] * gq[pos])
            out[self.agg_slices[i]] = (batch.counts[:, None] * w[None, :]).ravel()
        for j, pos in enumerate(pb.gen_pos):
            sp, sq, sr = self.gen_slices[j]
            out[sp] = gp[pos]
            out[sq] = gq[pos]
            out[sr] = gp[pos]
        return out

    # -- objective -------------------------------------------------------------
    def welfare(self, z: np.ndarray) -> float:
        w = 0.0
        for i, batch in enumerate(self.pb.agg_batch):
            if batch is not None:
                w += batch.utility(self.E(z, i))
        for j, a in enumerate(self.pb.gen_assets):
            w -= float(a.cost(self.gen(z, j)[0]).sum())
        return w

    def objective(self, z: np.ndarray) -> float:
        """Welfare minus the weighted voltage-drop risk."""
        inj = self.injections(z)
        return inj.welfare - self.pb.vartheta * risk(self.op, inj)

    def objective_value_and_gradient(self, z: np.ndarray) -> tuple[float, np.ndarray]:
        """Objective and its gradient; the risk is linear in the renewable offers."""
        g = np.zeros(self.size)
        val = 0.0
        for i, batch in enumerate(self.pb.agg_batch):
            if batch is None:
                continue
            E = self.E(z, i)
            val += batch.utility(E)
            grad = batch.counts[:, None] * batch.unit_gradient(E)
            grad[batch.fixed.astype(bool)] = 0.0
            g[self.agg_slices[i]] = grad.ravel()
        for j, a in enumerate(self.pb.gen_assets):
            sp, _, sr = self.gen_slices[j]
            pc = z[sp]
            val -= float(a.cost(pc).sum())
            g[sp] = -(2.0 * a.a2 * pc + a.a1)
            val -= self.gen_beta[j] * float((z[sr] - self.pb.ren_lo[j]).sum())
            g[sr] = -self.gen_beta[j]
        return val, g

    # -- network elimination ---------------------------------------------------
    def best_network(self, inj: Injections, mu: np.ndarray, c: float) -> np.ndarray:
        """Maximizer over the network polytope of ``mu . r - (c/2) |r|^2``."""
        op = self.op
        b = op.stack_inj(inj.p, inj.q) - op.a[:, None] - mu / c
        return op.project(op.pinv @ b, "network")

    def augmented(self, z: np.ndarray, mu: np.ndarray, c: float):
        """Value and gradient of the augmented Lagrangian with the network eliminated."""
        op = self.op
        inj = self.injections(z)
        x = self.best_network(inj, mu, c)
        r = op.residual(x, inj)
        f, g = self.objective_value_and_gradient(z)
        val = f + float((mu * r).sum()) - 0.5 * c * float((r * r).sum())
        w = mu - c * r
        gp = np.zeros((op.n, self.T)); gq = np.zeros((op.n, self.T))
        gp[:] = w[:op.n]
        gq[op.blocks.nonslack] = w[op.n:]
        return val, g + self.inj_adjoint(gp, gq), x, r


# ---------------------------------------------------------------- solve_central

def _fista(model: SlotModel, z0: np.ndarray, mu: np.ndarray, c: float, tol: float, max_iter: int,
           L0: float) -> tuple[np.ndarray, float, int, float]:
    """Accelerated projected gradient ascent; returns ``(z, gradient-map norm, iterations, L)``."""
    z = model.project(z0)
    y = z.copy()
    fz = model.augmented(z, mu, c)[0]
    tk = 1.0
    L = L0
    gmap = np.inf
    k = 0
    while k < max_iter:
        k += 1
        fy, gy, _, _ = model.augmented(y, mu, c)
        while True:
            zn = model.project(y + gy / L)
            d = zn - y
            fn = model.augmented(zn, mu, c)[0]
            if fn >= fy + float(gy @ d) - 0.5 * L * float(d @ d) - 1e-12 * max(1.0, abs(fy)):
                break
            L *= 2.0
            if not np.isfinite(fn) or L > 1e15:
                raise OracleNonConvergence("line search failed (non-finite or flat objective)")
        gmap = L * float(np.abs(d).max()) if d.size else 0.0
        if gmap <= tol:
            if fn >= fz:
                z = zn
            break
        if fn < fz and tk > 1.0:  # adaptive restart from the last accepted point
            y = z.copy()
            tk = 1.0
            continue
        tn = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tk * tk))
        y = zn + ((tk - 1.0) / tn) * (zn - z)
        z, fz, tk = zn, fn, tn
        L = max(L0, 0.9 * L)
    return z, gmap, k, L


def interior_check(op: NetworkOperator, T: int) -> None:
    """Raise :class:`InfeasibleProblem` unless the flat network state is strictly interior."""
    P = op.polytope
    if P.size == 0:
        return
    slack = -P.values(op.flat_state(T).x)
    if slack.min() <= 0.0:
        i = int(np.unravel_index(np.argmin(slack), slack.shape)[0])
        raise InfeasibleProblem(f"flat voltages are not strictly inside {P.labels[i]}")


def solve_central(problem, seed: int | None = None, tol: float = 1e-7, penalty: float = 1.0,
                  max_outer: int = 50, max_inner: int = 20000, z0: np.ndarray | None = None,
                  mu0: np.ndarray | None = None) -> CentralSolution:
    """Solve one slot problem centrally with an augmented Lagrangian.

    Parameters
    ----------
    problem : SlotProblem
        Slot data as seen by the market (awake cohorts, sleeping estimates,
        renewable bands).
    seed : int, optional
        Random feasible start; the mid-box point is used when omitted.
    tol : float
        Target for both the balance residual and the gradient-map norm.
    penalty : float
        Initial penalty. It doubles after an outer iteration that failed to
        shrink the residual fourfold.

    Raises
    ------
    InfeasibleProblem
        No strictly interior network state was found.
    OracleNonConvergence
        The residual or stationarity target was not met in ``max_outer`` rounds.
    """
    model = SlotModel(problem)
    op = model.op
    T = model.T
    interior_check(op, T)
    rng = np.random.default_rng(seed) if seed is not None else None
    z = model.start(rng) if z0 is None else model.project(np.asarray(z0, float))
    mu = np.zeros((op.nr, T)) if mu0 is None else np.array(mu0, dtype=float)
    c = float(penalty)
    L = 1.0
    total = 0
    res_prev = np.inf
    res = np.inf
    gmap = np.inf
    outer = 0
    for outer in range(1, max_outer + 1):
        inner_tol = max(tol, min(1e-2, 0.1 * res_prev)) if np.isfinite(res_prev) else 1e-2
        z, gmap, k, L = _fista(model, z, mu, c, inner_tol, max_inner, L)
        total += k
        _, _, x, r = model.augmented(z, mu, c)
        res = float(np.abs(r).max()) if r.size else 0.0
        mu = mu - c * r
        if res <= tol and gmap <= tol:
            break
        if res > 0.25 * res_prev:
            c *= 2.0
            L *= 2.0
        res_prev = res
    converged = res <= tol and gmap <= tol
    inj = model.injections(z)
    x = model.best_network(inj, mu, c)
    sol = _solution(model, z, x, mu, problem.t)
    sol.residual = float(np.abs(op.residual(x, inj)).max()) if op.nr else 0.0
    sol.stationarity = gmap
    sol.iterations = total
    sol.outer = outer
    sol.converged = converged
    sol.info = {"penalty": c}
    if not converged:
        raise OracleNonConvergence(
            f"slot {problem.t}: residual {res:.3e}, gradient map {gmap:.3e} after {outer} rounds")
    return sol


def _solution(model: SlotModel, z: np.ndarray, x: np.ndarray, mu: np.ndarray | None, t: int) -> CentralSolution:
    op = model.op
    inj = model.injections(z)
    theta, v = op.theta_v(x)
    lam = gam = None
    if mu is not None:
        lam, gam = op.split_mu(mu)
        lam, gam = lam.copy(), gam.copy()
    gens = [model.gen(z, j) for j in range(len(model.pb.gen_assets))]
    return CentralSolution(
        t, [model.E(z, i).copy() for i in range(len(model.pb.agg_batch))],
        [g[0].copy() for g in gens], [g[1].copy() for g in gens], [g[2].copy() for g in gens],
        inj.p, inj.q, theta, v, lam, gam, model.objective(z))


def solution_vector(model: SlotModel, sol: CentralSolution) -> np.ndarray:
    """Pack a solution back into the model's flat layout."""
    z = np.zeros(model.size)
    for i, E in enumerate(sol.E):
        if E.size:
            z[model.agg_slices[i]] = E.ravel()
    for j in range(len(sol.p_conv)):
        sp, sq, sr = model.gen_slices[j]
        z[sp], z[sq], z[sr] = sol.p_conv[j], sol.q_conv[j], sol.p_ren[j]
    return z


# ---------------------------------------------------------------- kkt_check

@dataclass
class KktReport:
    """Largest residual per block, per-bus agent stationarity and the scale used."""

    stationarity: dict[int, float]
    balance: float
    feasibility: float
    scale: float

    @property
    def agent(self) -> float:
        return max(self.stationarity.values(), default=0.0)

    @property
    def worst(self) -> float:
        return max(self.agent, self.balance, self.feasibility)

    def flagged(self, tol: float) -> list[int]:
        return [bus for bus, r in self.stationarity.items() if r > tol]

    def as_dict(self) -> dict:
        return {"stationarity": {str(b): r for b, r in self.stationarity.items()},
                "balance": self.balance, "feasibility": self.feasibility, "scale": self.scale,
                "max": self.worst}


def kkt_check(problem, sol: CentralSolution, lam: np.ndarray | None = None,
              gam: np.ndarray | None = None, x: np.ndarray | None = None) -> KktReport:
    """First-order residuals of ``sol`` at the prices implied by the multipliers.

    Each agent's residual is ``max |z - Proj(z + grad)|`` of its own profit
    problem at its prices (aggregators per unit, generators per variable),
    which is zero exactly when the agent best-responds. The balance residual
    compares the injections with the flow model at the solution's state, and
    feasibility is the largest violation of the voltage and polygon rows.

    ``lam``, ``gam`` and the reduced state ``x`` default to those stored in
    ``sol``.
    """
    model = SlotModel(problem)
    op = model.op
    pb = problem
    lam = sol.lam if lam is None else lam
    gam = sol.gam if gam is None else gam
    if lam is None or gam is None:
        raise ValueError("kkt_check needs multipliers")
    if x is None:
        full = np.vstack([sol.theta, sol.v])
        x = full[op.blocks.reduced]
    z = solution_vector(model, sol)
    inj = model.injections(z)
    stat: dict[int, float] = {}
    ids = op.blocks.ids
    for i, batch in enumerate(pb.agg_batch):
        pos = pb.agg_pos[i]
        rho = lam[pos] + gam[pos] * pb.agg_react[i]
        r = 0.0 if batch is None else stationarity_residual(batch, model.E(z, i), rho)
        stat[int(ids[pos])] = r
    beta = op.beta()
    for j, pos in enumerate(pb.gen_pos):
        a = pb.gen_assets[j]
        pc, qc, pr = model.gen(z, j)
        rho, varrho = lam[pos], gam[pos]
        r1 = np.abs(pc - np.clip(pc + rho - (2 * a.a2 * pc + a.a1), a.p_min, a.p_max))
        r2 = np.abs(qc - np.clip(qc + varrho, a.q_min, a.q_max))
        r3 = np.abs(pr - np.clip(pr + rho - beta[pos], pb.ren_lo[j], pb.ren_hi[j]))
        stat[int(ids[pos])] = float(max(r1.max(initial=0.0), r2.max(initial=0.0), r3.max(initial=0.0)))
    r = op.residual(x, inj)
    balance = float(np.abs(r).max()) if r.size else 0.0
    P = op.polytope
    feas = float(max(P.values(x).max(), 0.0)) if P.size else 0.0
    scale = max(1.0, float(np.abs(inj.p).max(initial=0.0)), float(np.abs(inj.q).max(initial=0.0)))
    return KktReport(stat, balance, feas, scale)


# ---------------------------------------------------------------- brute_force

def _axis(lo: float, hi: float, r: float) -> np.ndarray:
    if hi - lo <= 0.0:
        return np.array([lo])
    n = int(np.floor((hi - lo) / r + 1e-9))
    pts = lo + r * np.arange(n + 1)
    if hi - pts[-1] > 1e-12:
        pts = np.append(pts, hi)
    return pts


def brute_force(problem, resolution: float = 1e-3, chunk: int = 1 << 18) -> CentralSolution:
    """Exhaustive grid search over a tiny slot problem.

    Every cohort profile entry is enumerated at ``resolution`` (rows outside
    the energy band are dropped), and the generator's reactive and renewable
    outputs likewise when they have room. The generator's conventional active
    output is then fixed by the lossless active balance. Each candidate's
    network state follows from the flow model, and candidates outside the
    voltage box or a branch polygon are discarded.

    The returned ``grid_tolerance`` bounds how far the grid maximum can sit
    below the continuous maximum: ``resolution`` times the summed
    per-coordinate Lipschitz bounds of the objective.

    Raises
    ------
    ValueError
        The problem exceeds 3 buses, 2 slots, 2 appliance cohorts or 1 generator,
        or has shunt elements.
    GridTooLarge
        More than ``10**8`` grid points.
    InfeasibleProblem
        No grid point is feasible.
    """
    op: NetworkOperator = problem.op
    T = problem.T
    net = op.scenario.network
    n_coh = sum(0 if b is None else b.size for b in problem.agg_batch)
    if op.n > 3 or T > 2 or n_coh > 2 or len(problem.gen_assets) != 1:
        raise ValueError("brute_force handles at most 3 buses, 2 slots, 2 cohorts and exactly 1 generator")
    if any(b.g_shunt or b.b_shunt for b in net.buses):
        raise ValueError("brute_force needs a network without shunts (lossless active balance)")
    model = SlotModel(problem)
    gen = problem.gen_assets[0]
    gpos = problem.gen_pos[0]
    # enumerated coordinates: (name, row-or-None, slot, grid)
    axes: list[tuple] = []
    for i, batch in enumerate(problem.agg_batch):
        if batch is None:
            continue
        for k in range(batch.size):
            for h in range(T):
                lo, hi = batch.lo[k, h], batch.hi[k, h]
                if batch.fixed[k]:
                    hi = lo
                axes.append(("E", (i, k), h, _axis(lo, hi, resolution)))
    for h in range(T):
        axes.append(("q", None, h, _axis(gen.q_min, gen.q_max, resolution)))
        axes.append(("r", None, h, _axis(problem.ren_lo[0][h], problem.ren_hi[0][h], resolution)))
    sizes = [len(ax[3]) for ax in axes]
    total = int(np.prod(sizes, dtype=float))
    if total > MAX_GRID_POINTS:
        raise GridTooLarge(f"{total:.3g} grid points exceed the limit of {MAX_GRID_POINTS:.0e}")
    P = op.polytope
    best_val = -np.inf
    best_z = None
    for start in range(0, total, chunk):
        idx = np.arange(start, min(total, start + chunk))
        coords = np.unravel_index(idx, sizes)
        N = idx.size
        Z = np.zeros((N, model.size))
        for (name, row, h, grid), ci in zip(axes, coords):
            val = grid[ci]
            if name == "E":
                i, k = row
                base = model.agg_slices[i].start
                Z[:, base + k * T + h] = val
            else:
                sp, sq, sr = model.gen_slices[0]
                Z[:, (sq if name == "q" else sr).start + h] = val
        ok = np.ones(N, dtype=bool)
        for i, batch in enumerate(problem.agg_batch):
            if batch is None:
                continue
            for k in range(batch.size):
                E = Z[:, model.agg_slices[i].start + k * T: model.agg_slices[i].start + (k + 1) * T]
                tot = (E * batch.inmask[k]).sum(axis=1)
                ok &= (tot >= batch.band_lo[k] - 1e-9) & (tot <= batch.band_hi[k] + 1e-9)
        # active balance fixes the conventional output
        sp, sq, sr = model.gen_slices[0]
        net_p = np.zeros((N, T))
        for i, batch in enumerate(problem.agg_batch):
            load = np.broadcast_to(problem.agg_sleep[i], (N, T)).copy()
            if batch is not None:
                for k in range(batch.size):
                    s0 = model.agg_slices[i].start + k * T
                    load += batch.counts[k] * Z[:, s0:s0 + T]
            net_p += load
        pc = net_p - Z[:, sr]
        ok &= (pc >= gen.p_min - 1e-12).all(axis=1) & (pc <= gen.p_max + 1e-12).all(axis=1)
        Z[:, sp] = pc
        if not ok.any():
            continue
        Z = Z[ok]
        N = Z.shape[0]
        # flows: candidates become extra columns
        p = np.zeros((op.n, N, T)); q = np.zeros((op.n, N, T))
        for i, batch in enumerate(problem.agg_batch):
            load = np.broadcast_to(problem.agg_sleep[i], (N, T)).copy()
            if batch is not None:
                for k in range(batch.size):
                    s0 = model.agg_slices[i].start + k * T
                    load += batch.counts[k] * Z[:, s0:s0 + T]
            p[problem.agg_pos[i]] -= load
            q[problem.agg_pos[i]] -= load * problem.agg_react[i]
        p[gpos] += Z[:, sp] + Z[:, sr]
        q[gpos] += Z[:, sq]
        st = solve_flow(op.blocks, p.reshape(op.n, N * T), q.reshape(op.n, N * T))
        xr = np.vstack([st.theta, st.v])[op.blocks.reduced]
        feas = np.ones(N, dtype=bool)
        if P.size:
            viol = P.values(xr).reshape(P.size, N, T)
            feas = (viol <= 1e-12).all(axis=(0, 2))
        if not feas.any():
            continue
        Z = Z[feas]
        vals = np.array([model.objective(zz) for zz in Z]) if Z.shape[0] <= 64 else _batch_objective(model, Z)
        j = int(np.argmax(vals))
        if vals[j] > best_val:
            best_val, best_z = float(vals[j]), Z[j].copy()
    if best_z is None:
        raise InfeasibleProblem("no grid point satisfies the voltage and branch limits")
    inj = model.injections(best_z)
    st = solve_flow(op.blocks, inj.p, inj.q)
    x = np.vstack([st.theta, st.v])[op.blocks.reduced]
    sol = _solution(model, best_z, x, None, problem.t)
    sol.grid_tolerance = resolution * _lipschitz_sum(model, problem)
    sol.info = {"points": total}
    return sol


def _batch_objective(model: SlotModel, Z: np.ndarray) -> np.ndarray:
    """Objective of many candidates at once (utility, cost and the linear risk term)."""
    pb = model.pb
    T = model.T
    N = Z.shape[0]
    val = np.zeros(N)
    for i, batch in enumerate(pb.agg_batch):
        if batch is None:
            continue
        s0 = model.agg_slices[i].start
        for k in range(batch.size):
            sub = batch.subset(np.full(N, k))
            E = Z[:, s0 + k * T: s0 + (k + 1) * T]
            val += batch.counts[k] * sub.unit_utility(E)
    for j, a in enumerate(pb.gen_assets):
        sp, _, sr = model.gen_slices[j]
        val -= a.cost(Z[:, sp]).sum(axis=1)
        val -= model.gen_beta[j] * (Z[:, sr] - pb.ren_lo[j]).sum(axis=1)
    # the risk is linear in the renewable offer with weight beta, so it is already included
    return val


def _lipschitz_sum(model: SlotModel, problem) -> float:
    """Sum over enumerated coordinates of a bound on the objective's partial derivatives."""
    gen = problem.gen_assets[0]
    mc = abs(2.0 * gen.a2 * gen.p_max + gen.a1) + abs(gen.a1)
    total = 0.0
    for batch in problem.agg_batch:
        if batch is None:
            continue
        for k in range(batch.size):
            # utility slope is at most kappa at the lower end; each unit moves the generator too
            kap = float(np.abs(batch.kappa[k]).max(initial=0.0))
            total += batch.T * batch.counts[k] * (kap + mc)
    total += problem.T * (mc + abs(model.gen_beta[0]))
    return total


def from_market(market, outcome) -> CentralSolution:
    """The market's current decisions and signals for the slot of ``outcome`` as a solution.

    Call it from the ``on_slot`` hook of :func:`~gridtrade.market.run_horizon`,
    before the slot is committed.
    """
    op = market.op
    E = [a.E.copy() for a in market.aggs]
    gens = [g.decision for g in market.gens]
    theta, v = op.theta_v(outcome.state.x)
    sig = outcome.signals
    return CentralSolution(
        outcome.t, E, [d.p_conv.copy() for d in gens], [d.q_conv.copy() for d in gens],
        [d.p_ren.copy() for d in gens], outcome.p.copy(), outcome.q.copy(), theta, v,
        sig.lam.copy(), sig.gam.copy(), outcome.objective, outcome.residual,
        iterations=outcome.iterations, converged=outcome.converged)


# ---------------------------------------------------------------- rolling horizon

def central_slot(market, t: int, trace: list | None = None, tol: float = 1e-7):
    """Clear slot ``t`` of ``market`` with :func:`solve_central` instead of the price iteration.

    The agents' decisions, the network state and the prices are set from the
    central solution, so the committed slot and the bookkeeping of
    :func:`~gridtrade.market.run_horizon` are exactly as after a market slot.
    ``trace`` is accepted for interface compatibility and left untouched.
    """
    import time

    from gridtrade.dno import DnoState, signals
    from gridtrade.generator import GeneratorDecision
    from gridtrade.market import SlotOutcome

    start = time.perf_counter()
    market.begin_slot(t)
    op = market.op
    T = market.H - t + 1
    sol = solve_central(market.problem(t), tol=tol)
    for i, a in enumerate(market.aggs):
        if a.batch is not None:
            a.E = sol.E[i].copy()
    for j, g in enumerate(market.gens):
        d = g.decision
        g.decision = GeneratorDecision(sol.p_conv[j].copy(), sol.q_conv[j].copy(), sol.p_ren[j].copy(),
                                       d.ren_min, d.ren_max, d.confidence)
    x = np.vstack([sol.theta, sol.v])[op.blocks.reduced]
    mu = np.vstack([sol.lam, sol.gam[op.blocks.nonslack]])
    state = DnoState(x, mu, sol.iterations, 0.0)
    market.state = state
    for a in market.aggs:
        a.sync()
    inj = market.injections(T)
    m = market.scenario.market
    return SlotOutcome(t, sol.iterations, sol.converged, sol.residual, time.perf_counter() - start,
                       inj.p.copy(), inj.q.copy(), signals(op, state), state.copy(), market.welfare(),
                       risk(op, inj), m.vartheta)


def run_central(scenario, seed: int | None = None, world=None, tol: float = 1e-7, **kw):
    """Rolling-horizon run in which every slot is cleared by :func:`solve_central`.

    Agents see the same information as in the uncertainty market (wake events
    as they happen, forecast renewable bands); only the clearing differs.
    Returns a :class:`~gridtrade.market.SimulationResult` labelled ``"central"``.
    """
    from gridtrade.market import run_horizon

    return run_horizon(scenario, "uncertainty", seed, world, trace=False,
                       solver=lambda mk, t, tr: central_slot(mk, t, tr, tol), label="central", **kw)


def compare_market(scenario, seed: int | None = None, world=None, threads: int = 1,
                   max_iters: int | None = None, tol: float = 1e-7):
    """Run the market and solve every slot it cleared centrally from the same data.

    Per slot the report holds the largest deviation of the committed
    injections (slot ``t`` only), the relative gap between the market's and
    the central objective over ``t..H``, and the KKT residual of the market
    equilibrium at its own prices together with the scale it is judged
    against. Returns ``(report, market_result)``.
    """
    from gridtrade.market import run_horizon

    rows = []

    def hook(mk, out):
        pb = mk.problem(out.t)
        mine = from_market(mk, out)
        ref = solve_central(pb, tol=tol)
        kkt = kkt_check(pb, mine)
        dev = max(float(np.abs(mine.p[:, 0] - ref.p[:, 0]).max()),
                  float(np.abs(mine.q[:, 0] - ref.q[:, 0]).max()))
        rel = abs(mine.objective - ref.objective) / max(1.0, abs(ref.objective))
        rows.append({"slot": out.t, "injection_deviation": dev, "market_objective": mine.objective,
                     "central_objective": ref.objective, "objective_rel_deviation": rel,
                     "kkt_residual": kkt.worst, "kkt_scale": kkt.scale,
                     "market_converged": bool(out.converged)})

    res = run_horizon(scenario, "uncertainty", seed, world, threads, max_iters, on_slot=hook)
    report = {
        "scenario": scenario.name, "slots": rows,
        "max_injection_deviation": max((r["injection_deviation"] for r in rows), default=0.0),
        "max_objective_rel_deviation": max((r["objective_rel_deviation"] for r in rows), default=0.0),
        "max_kkt_residual": max((r["kkt_residual"] for r in rows), default=0.0),
        "max_kkt_relative": max((r["kkt_residual"] / r["kkt_scale"] for r in rows), default=0.0),
    }
    return report, res
