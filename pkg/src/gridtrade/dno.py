"""Network operator: Lagrangian updates over the linear flow model and price signals.

Per slot ``h`` the operator holds the reduced network state ``x`` (angles then
magnitudes of the non-slack buses) and one multiplier per enforced balance
row: the active rows of every bus (``lambda``) and the reactive rows of the
non-slack buses (``gamma``; the slack's reactive balance is left free, so its
``gamma`` is zero). With ``r = inj - Lambda [theta; v]`` on those rows the
Lagrangian is

    L = W - vartheta * Gamma + mu . r - (c / 2) |r|^2

where ``W`` is utility minus conventional cost and ``Gamma`` the worst-case
voltage-drop risk, both fixed by the agents' current profiles.

The update is ascent in ``x`` and descent in ``mu``. In the default network
metric the ascent direction is preconditioned by ``M = A^T A`` (``A`` the
enforced rows of ``Lambda`` restricted to non-slack columns) and the
projection onto the voltage box and branch polygons is taken in the same
metric, which makes the step size independent of the impedance scale.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.optimize import nnls

from gridtrade import kernels
from gridtrade.grid import Scenario
from gridtrade.linpf import AdmittanceBlocks, Polytope, assemble_lambda, network_polytope, solve_flow


@dataclass
class Injections:
    """Agent messages of one iteration, stacked per bus over the slots ``t..H``.

    ``ren``/``ren_min`` are zero on buses without a renewable. ``welfare`` is
    total utility minus total conventional cost.
    """

    p: np.ndarray
    q: np.ndarray
    ren: np.ndarray
    ren_min: np.ndarray
    welfare: float = 0.0


@dataclass
class DnoState:
    """Network state ``x`` (shape ``(m, T)``) and multipliers ``mu`` (shape ``(nr, T)``)."""

    x: np.ndarray
    mu: np.ndarray
    k: int = 0
    step: float = 0.0

    def copy(self) -> "DnoState":
        return DnoState(self.x.copy(), self.mu.copy(), self.k, self.step)


@dataclass(frozen=True)
class SignalBundle:
    """Prices per bus and slot: ``rho`` (active), ``varrho`` (reactive) and penalties ``beta``.

    ``varrho`` is meaningful on generator buses and ``beta`` on renewable
    buses; other entries are zero.
    """

    rho: np.ndarray
    varrho: np.ndarray
    beta: np.ndarray
    lam: np.ndarray
    gam: np.ndarray


class NetworkOperator:
    """Everything the operator precomputes once per network."""

    def __init__(self, scenario: Scenario, blocks: AdmittanceBlocks | None = None):
        self.scenario = scenario
        self.blocks = blocks or assemble_lambda(scenario.network)
        b = self.blocks
        n = b.n
        self.n = n
        self.rows = np.array(list(range(n)) + [n + i for i in b.nonslack], dtype=int)
        self.A = b.Lam[np.ix_(self.rows, b.reduced)]
        self.a = b.Lam[self.rows, n + b.slack_pos]
        self.m = self.A.shape[1]
        self.nr = self.A.shape[0]
        kind = {bus.id: bus.kind for bus in scenario.network.buses}
        self.kind = [kind[i] for i in b.ids]
        self.react = np.zeros(n)
        for agg in scenario.aggregators:
            self.react[b.pos[agg.bus]] = agg.reactive_factor
        self.gen_pos = np.array([b.pos[g.bus] for g in scenario.generators], dtype=int)
        self.ren_pos = np.array([b.pos[g.bus] for g in scenario.generators if g.renewable is not None],
                                dtype=int)

    # -- index helpers -------------------------------------------------------
    def split_mu(self, mu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``(lambda, gamma)`` per bus; ``gamma`` of the slack is zero."""
        n = self.n
        lam = mu[:n]
        gam = np.zeros_like(lam)
        gam[self.blocks.nonslack] = mu[n:]
        return lam, gam

    def stack_inj(self, p: np.ndarray, q: np.ndarray) -> np.ndarray:
        return np.vstack([p, q])[self.rows]

    def theta_v(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        st = self.blocks.embed(x)
        return st.theta, st.v

    def residual(self, x: np.ndarray, inj: Injections) -> np.ndarray:
        """``inj - Lambda [theta; v]`` on the enforced rows, shape ``(nr, T)``."""
        return self.stack_inj(inj.p, inj.q) - self.A @ x - self.a[:, None]

    # -- cached linear algebra ----------------------------------------------
    @cached_property
    def pinv(self) -> np.ndarray:
        return np.linalg.pinv(self.A)

    @cached_property
    def polytope(self) -> Polytope:
        return network_polytope(self.blocks)

    @cached_property
    def _metric_dirs(self):
        P = self.polytope
        G = P.dense(self.m)
        Minv_G = self.pinv @ (self.pinv.T @ G.T)  # M^{-1} g_i as columns
        w = np.einsum("ij,ji->i", G, Minv_G)
        return np.ascontiguousarray(Minv_G.T), w

    @cached_property
    def _euclid_dirs(self):
        G = self.polytope.dense(self.m)
        return np.ascontiguousarray(G), (G * G).sum(axis=1)

    @cached_property
    def voltage_sensitivity(self) -> np.ndarray:
        """``sum_b d v_b / d p_j`` for every bus ``j`` (zero at the slack)."""
        S = self.blocks.sensitivity
        n = self.n
        return S[n:, :n].sum(axis=0)

    @cached_property
    def beta_unit(self) -> np.ndarray:
        """Per-bus penalty per unit of ``vartheta`` (nonzero on renewable buses only)."""
        out = np.zeros(self.n)
        out[self.ren_pos] = self.voltage_sensitivity[self.ren_pos]
        return out

    def beta(self) -> np.ndarray:
        return self.scenario.market.vartheta * self.beta_unit

    @cached_property
    def _range_rows(self) -> np.ndarray:
        """``G A^+``: constraint rows acting on a change ``u = A dx`` of the balance rows."""
        return self.polytope.dense(self.m) @ self.pinv

    # -- projection ----------------------------------------------------------
    def project(self, x: np.ndarray, metric: str = "network", tol: float = 1e-12,
                method: str = "ldp") -> np.ndarray:
        """Project each column of ``x`` onto the voltage box and branch polygons.

        ``metric="network"`` measures distance as ``|A (y - x)|``; the default
        ``method="ldp"`` solves it exactly as a least-distance problem over a
        growing working set of violated rows, ``method="hildreth"`` by dual
        coordinate ascent (slow when many rows bind, kept as a cross-check).
        ``metric="euclidean"`` always uses coordinate ascent, whose sparse
        directions make it fast there.
        """
        P = self.polytope
        if P.size == 0:
            return np.array(x, dtype=float, copy=True)
        if metric == "network" and method == "ldp":
            return self._project_ldp(np.asarray(x, dtype=float))
        if metric not in ("network", "euclidean"):
            raise ValueError(f"unknown metric {metric!r}")
        dirs, w = self._metric_dirs if metric == "network" else self._euclid_dirs
        X = np.ascontiguousarray(np.asarray(x, dtype=float).T)
        out, _ = kernels.hildreth(X, P.cidx, P.cval, P.rhs, dirs, w, tol)
        return np.ascontiguousarray(out.T)

    def _project_ldp(self, x0: np.ndarray) -> np.ndarray:
        """Network-metric projection via non-negative least squares.

        With ``u = A (y - x0)`` the problem is ``min |u|`` subject to
        ``G A^+ u <= h - G x0``, a least-distance program. Its solution is
        ``u = -r[:-1] / r[-1]`` where ``r`` is the residual of the NNLS
        problem ``min |[E^T; f^T] w - e_last|, w >= 0`` with ``E = -G A^+``
        and ``f = G x0 - h``. Rows are added until none is violated.
        """
        P = self.polytope
        GA = self._range_rows
        out = np.array(x0, dtype=float, copy=True)
        if out.ndim == 1:
            return self._project_ldp(out[:, None])[:, 0]
        vals = P.values(out)
        scale = 1e-10 * (1.0 + np.abs(P.rhs))
        nr = GA.shape[1]
        e = np.zeros(nr + 1)
        e[-1] = 1.0
        for t in np.flatnonzero((vals > scale[:, None]).any(axis=0)):
            f_all = vals[:, t]
            work = np.flatnonzero(f_all > scale)
            xt = out[:, t]
            for _ in range(P.size):
                F = np.vstack([-GA[work].T, f_all[work][None, :]])
                w, rn = nnls(F, e, maxiter=50 * max(len(work), 10))
                r = F @ w - e
                if rn <= 1e-12 or abs(r[-1]) <= 1e-300:
                    raise ValueError("voltage and branch limits admit no network state")
                u = -r[:-1] / r[-1]
                xt = out[:, t] + self.pinv @ u
                now = P.values(xt)
                extra = np.setdiff1d(np.flatnonzero(now > scale), work)
                if extra.size == 0:
                    break
                work = np.union1d(work, extra)
            out[:, t] = xt
        return out

    # -- initial state -------------------------------------------------------
    def flat_state(self, T: int) -> DnoState:
        """``theta = 0``, ``v = 1`` on every bus and zero multipliers."""
        full = np.zeros((2 * self.n, T))
        full[self.n:] = 1.0
        return DnoState(full[self.blocks.reduced].copy(), np.zeros((self.nr, T)), 0, 0.0)


def risk(op: NetworkOperator, inj: Injections) -> float:
    """Worst-case voltage-drop risk: summed gap between scheduled and pessimistic magnitudes."""
    if op.ren_pos.size == 0:
        return 0.0
    v = solve_flow(op.blocks, inj.p, inj.q).v
    v_hat = solve_flow(op.blocks, inj.p - (inj.ren - inj.ren_min), inj.q).v
    return float((v - v_hat).sum())


def lagrangian_value_and_gradient(op: NetworkOperator, state: DnoState, inj: Injections,
                                  penalty: float = 0.0) -> tuple[float, np.ndarray, np.ndarray]:
    """Value of the operator's Lagrangian and its gradient in ``(x, mu)``.

    The risk term is a function of the injections alone (its dependence on
    the network variables cancels between scheduled and worst-case voltages),
    so it enters the value but not the gradient.

    Returns
    -------
    value : float
    grad_x : ndarray, shape (m, T)
    grad_mu : ndarray, shape (nr, T)
        Equal to the balance residual.
    """
    if inj.p.shape != (op.n, state.x.shape[1]):
        raise ValueError(f"injections have shape {inj.p.shape}, expected {(op.n, state.x.shape[1])}")
    r = op.residual(state.x, inj)
    f_dno = inj.welfare - op.scenario.market.vartheta * risk(op, inj)
    value = f_dno + float((state.mu * r).sum()) - 0.5 * penalty * float((r * r).sum())
    grad_x = op.A.T @ (penalty * r - state.mu)
    return value, grad_x, r


def update_phi(op: NetworkOperator, state: DnoState, grad_x: np.ndarray, grad_mu: np.ndarray,
               step: float, metric: str = "euclidean", penalty: float = 1.0,
               mu_scale: float = 0.5) -> DnoState:
    """One projected primal-ascent, dual-descent step.

    ``x' = Proj(x + step * D grad_x)`` with ``D = I`` (``metric="euclidean"``)
    or ``D = M^{-1} / penalty`` (``metric="network"``), projected in the
    matching metric; ``mu' = mu - step * mu_scale * penalty * grad_mu``.
    """
    if metric == "network":
        dx = op.pinv @ (op.pinv.T @ grad_x) / penalty
    elif metric == "euclidean":
        dx = grad_x
    else:
        raise ValueError(f"unknown metric {metric!r}")
    x = op.project(state.x + step * dx, metric)
    mu = state.mu - step * mu_scale * penalty * grad_mu
    return DnoState(x, mu, state.k + 1, step)


def network_step(op: NetworkOperator, state: DnoState, inj: Injections, step: float,
                 penalty: float, mu_scale: float, exact: bool = False) -> tuple[DnoState, np.ndarray]:
    """Market update in the network metric; returns the new state and the residual the multipliers saw.

    With ``exact=True`` the network state moves to the maximizer of the
    penalized Lagrangian for the current injections and multipliers (a unit
    step in the network metric) and the multipliers then descend along the
    residual left after that move. That residual carries only the system-wide
    imbalance and the part the limits prevent the network from absorbing, so
    the price step is set by the market's aggregate elasticity rather than by
    local flow mismatches. With ``exact=False`` both blocks take the step
    ``step`` from the pre-update residual, as in :func:`update_phi`.
    """
    r = op.residual(state.x, inj)
    dx = op.pinv @ (r - state.mu / penalty)
    if exact:
        x = op.project(state.x + dx, "network")
        r = op.residual(x, inj)
    else:
        x = op.project(state.x + step * dx, "network")
    mu = state.mu - step * mu_scale * penalty * r
    return DnoState(x, mu, state.k + 1, step), r


def signals(op: NetworkOperator, state: DnoState) -> SignalBundle:
    """Prices from the multipliers.

    Aggregators pay ``lambda + gamma * sqrt((1 - PF^2) / PF^2)``; generators
    are paid ``lambda`` for active and ``gamma`` for reactive power and are
    charged ``beta`` per unit of renewable offer above its lower bound.
    """
    lam, gam = op.split_mu(state.mu)
    T = lam.shape[1]
    rho = lam + gam * op.react[:, None]
    rho[op.gen_pos] = lam[op.gen_pos]
    varrho = np.zeros_like(lam)
    varrho[op.gen_pos] = gam[op.gen_pos]
    beta = np.repeat(op.beta()[:, None], T, axis=1)
    return SignalBundle(rho, varrho, beta, lam.copy(), gam)
