"""Linearized AC power flow.

Injections and bus voltages are related by the linear map

    [p; q] = Lambda [theta; v],   Lambda = [[-B', G'], [-G', -B]]

where ``G + jB`` is the bus admittance matrix (off-diagonal ``-y_series``,
diagonal the sum of incident series admittances plus the shunt) and the
primed blocks drop the shunt from the diagonal. Rows and columns follow the
bus order of the network: angles first, then magnitudes.

The slack bus is anchored at ``theta = 0``, ``v = 1``. Removing its two rows
and columns leaves an invertible matrix whose LU factorization is computed
once and reused for every solve.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from gridtrade.grid import Branch, NetworkModel, UNLIMITED

SINGULAR_RCOND = 1e-13


class SingularNetworkError(np.linalg.LinAlgError):
    """The (reduced) power-flow matrix is numerically singular."""


def series_admittance(branch: Branch, split_reactance: float) -> tuple[float, float]:
    """``(g, b)`` of ``1 / (r + jx)``; a zero-impedance branch uses ``x = split_reactance``."""
    r, x = branch.r, branch.x
    if r == 0.0 and x == 0.0:
        x = split_reactance
    z2 = r * r + x * x
    return r / z2, -x / z2


def effective_rx(branch: Branch, split_reactance: float) -> tuple[float, float]:
    if branch.r == 0.0 and branch.x == 0.0:
        return 0.0, split_reactance
    return branch.r, branch.x


@dataclass(frozen=True)
class FlowState:
    """Bus angles and magnitudes, shape ``(n, T)``, in network bus order."""

    theta: np.ndarray
    v: np.ndarray


class AdmittanceBlocks:
    """The four admittance blocks, ``Lambda`` and the cached slack-reduced factorization."""

    def __init__(self, network: NetworkModel, B, Bp, G, Gp):
        self.network = network
        self.B, self.Bp, self.G, self.Gp = B, Bp, G, Gp
        self.n = B.shape[0]
        self.ids = network.ids
        self.pos = network.index()
        self.slack_pos = self.pos[network.slack]
        self.Lam = np.block([[-Bp, Gp], [-G, -B]])
        n = self.n
        keep = np.ones(2 * n, dtype=bool)
        keep[[self.slack_pos, n + self.slack_pos]] = False
        #: rows/columns of Lambda that survive slack removal: theta_R then v_R
        self.reduced = np.flatnonzero(keep)
        self.nonslack = np.array([i for i in range(n) if i != self.slack_pos], dtype=int)

    # -- factorization -------------------------------------------------------
    @cached_property
    def _lu(self):
        A = self.Lam[np.ix_(self.reduced, self.reduced)]
        _check_nonsingular(A, [self.row_label(i) for i in self.reduced])
        return sla.lu_factor(A)

    @cached_property
    def anchor(self) -> np.ndarray:
        """``Lambda[R, v_slack]``: contribution of the slack magnitude ``v = 1`` to each reduced row."""
        return self.Lam[self.reduced, self.n + self.slack_pos].copy()

    @cached_property
    def flat(self) -> np.ndarray:
        """Reduced state at zero injection, shape ``(2n-2,)``."""
        return sla.lu_solve(self._lu, -self.anchor)

    def solve_reduced(self, rhs: np.ndarray) -> np.ndarray:
        return sla.lu_solve(self._lu, rhs)

    def row_label(self, i: int) -> str:
        n = self.n
        return f"{'p/theta' if i < n else 'q/v'}[bus {self.ids[i % n]}]"

    @cached_property
    def sensitivity(self) -> np.ndarray:
        """Reduced inverse re-embedded at full size with zero slack rows and columns."""
        return reduced_inverse(self)

    @cached_property
    def norm_inf(self) -> float:
        return float(np.abs(self.Lam).sum(axis=1).max())

    # -- state helpers -------------------------------------------------------
    def embed(self, x: np.ndarray) -> FlowState:
        """Reduced state ``(2n-2, T)`` to a :class:`FlowState` with slack anchors."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        full = np.zeros((2 * self.n, x.shape[1]))
        full[self.reduced] = x
        full[self.n + self.slack_pos] = 1.0
        return FlowState(full[:self.n], full[self.n:])

    def reduce(self, state: FlowState) -> np.ndarray:
        return np.vstack([state.theta, state.v])[self.reduced]

    def injections(self, state: FlowState) -> tuple[np.ndarray, np.ndarray]:
        """``Lambda [theta; v]`` split into active and reactive parts."""
        out = self.Lam @ np.vstack([state.theta, state.v])
        return out[:self.n], out[self.n:]


def assemble_lambda(network: NetworkModel) -> AdmittanceBlocks:
    """Build the admittance blocks and ``Lambda`` of a normalized network."""
    n = network.n
    pos = network.index()
    Y = np.zeros((n, n), dtype=complex)
    for br in network.branches:
        g, b = series_admittance(br, network.split_reactance)
        y = complex(g, b)
        r, s = pos[br.from_bus], pos[br.to_bus]
        Y[r, r] += y
        Y[s, s] += y
        Y[r, s] -= y
        Y[s, r] -= y
    shunt = np.array([complex(bus.g_shunt, bus.b_shunt) for bus in network.buses])
    Y[np.diag_indices(n)] += shunt
    G, B = Y.real.copy(), Y.imag.copy()
    Gp, Bp = G.copy(), B.copy()
    Gp[np.diag_indices(n)] -= shunt.real
    Bp[np.diag_indices(n)] -= shunt.imag
    return AdmittanceBlocks(network, B, Bp, G, Gp)


def _check_nonsingular(A: np.ndarray, labels: list[str]) -> None:
    if A.size == 0:
        return
    s = np.linalg.svd(A, compute_uv=False)
    if s[-1] > SINGULAR_RCOND * s[0]:
        return
    _, sv, vh = np.linalg.svd(A.T)
    null = vh[-1]  # left null vector of A: a dependent combination of rows
    rows = [labels[i] for i in np.flatnonzero(np.abs(null) > 1e-3 * np.abs(null).max())]
    raise SingularNetworkError(
        f"power-flow matrix is singular (sigma_min/sigma_max = {sv[-1] / sv[0]:.2e}); "
        f"numerically dependent rows: {', '.join(rows)}")


def reduced_inverse(blocks: AdmittanceBlocks, slack: int | None = -1) -> np.ndarray:
    """Inverse of ``Lambda`` with the slack rows and columns removed, re-embedded at full size.

    Parameters
    ----------
    slack : int or None
        Slack bus id; the default uses the network's slack. ``None`` inverts the
        full matrix, which fails for any network without shunts because angles
        are only defined up to a common shift.

    Returns
    -------
    ndarray, shape (2n, 2n)
        Entry ``[n + b, j]`` is the sensitivity of ``v_b`` to active injection at
        bus ``j`` (positions in network bus order). Slack rows/columns are zero.

    Raises
    ------
    SingularNetworkError
        Naming the numerically dependent rows.
    """
    n = blocks.n
    labels = [blocks.row_label(i) for i in range(2 * n)]
    if slack is None:
        _check_nonsingular(blocks.Lam, labels)
        return np.linalg.inv(blocks.Lam)
    sp = blocks.slack_pos if slack == -1 else blocks.pos[slack]
    keep = np.ones(2 * n, dtype=bool)
    keep[[sp, n + sp]] = False
    idx = np.flatnonzero(keep)
    A = blocks.Lam[np.ix_(idx, idx)]
    _check_nonsingular(A, [labels[i] for i in idx])
    out = np.zeros((2 * n, 2 * n))
    out[np.ix_(idx, idx)] = np.linalg.inv(A)
    return out


def solve_flow(blocks: AdmittanceBlocks, p, q) -> FlowState:
    """Bus state that realizes the given injections at every non-slack bus.

    ``p`` and ``q`` have shape ``(n,)`` or ``(n, T)`` in network bus order; the
    slack entries are ignored (the slack injection is whatever balances).
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.ndim == 1:
        p, q = p[:, None], q[:, None]
    rhs = np.vstack([p, q])[blocks.reduced] - blocks.anchor[:, None]
    return blocks.embed(blocks.solve_reduced(rhs))


def branch_flow_values(theta_r, theta_s, v_r, v_s, r: float, x: float):
    """Active and reactive flow from ``r`` to ``s`` on a branch with impedance ``r + jx``."""
    z2 = r * r + x * x
    dv = np.asarray(v_r) - np.asarray(v_s)
    dth = np.asarray(theta_r) - np.asarray(theta_s)
    return (r * dv + x * dth) / z2, (x * dv - r * dth) / z2


def branch_flow(blocks: AdmittanceBlocks, state: FlowState, branch: Branch, slot: int = 0):
    """``(p_rs, q_rs)`` on ``branch`` at column ``slot`` of ``state``."""
    r, s = blocks.pos[branch.from_bus], blocks.pos[branch.to_bus]
    R, X = effective_rx(branch, blocks.network.split_reactance)
    p, q = branch_flow_values(state.theta[r, slot], state.theta[s, slot],
                              state.v[r, slot], state.v[s, slot], R, X)
    return float(p), float(q)


def polygon_values(p: float, q: float, branch: Branch) -> np.ndarray:
    """``p cos(m alpha) + q sin(m alpha) - s_max`` for each polygon side ``m``."""
    ang = branch.alpha * np.arange(branch.sides)
    return p * np.cos(ang) + q * np.sin(ang) - branch.s_max


def polygon_violations(p: float, q: float, branch: Branch, tol: float = 1e-12) -> list[tuple[int, float]]:
    """Sides ``m`` whose half-plane excludes ``(p, q)``, with the excess over ``s_max``."""
    vals = polygon_values(p, q, branch)
    lim = tol * max(1.0, branch.s_max)
    return [(int(m), float(vals[m])) for m in np.flatnonzero(vals > lim)]


def worst_case_voltage(blocks: AdmittanceBlocks, p, q, ren_scheduled, ren_min) -> np.ndarray:
    """Voltage magnitudes with every renewable offer replaced by its lower bound.

    ``ren_scheduled`` and ``ren_min`` are per-bus arrays (zero where a bus has
    no renewable) shaped like ``p``.
    """
    p_hat = np.asarray(p, float) - (np.asarray(ren_scheduled, float) - np.asarray(ren_min, float))
    return solve_flow(blocks, p_hat, q).v


@dataclass(frozen=True)
class Polytope:
    """Half-planes ``g_i . x <= rhs_i`` in reduced coordinates, four nonzeros each.

    Rows are the voltage bounds of the non-slack buses followed by the polygon
    sides of every limited branch. ``labels[i]`` names the constraint.
    """

    cidx: np.ndarray
    cval: np.ndarray
    rhs: np.ndarray
    labels: tuple[str, ...]

    @property
    def size(self) -> int:
        return self.rhs.shape[0]

    def values(self, x: np.ndarray) -> np.ndarray:
        """``g_i . x - rhs_i`` for reduced states ``x`` of shape ``(m,)`` or ``(m, T)``."""
        x = np.asarray(x, float)
        if x.ndim == 1:
            return (self.cval * x[self.cidx]).sum(axis=1) - self.rhs
        return np.einsum("ik,ikt->it", self.cval, x[self.cidx]) - self.rhs[:, None]

    def dense(self, m: int) -> np.ndarray:
        Gm = np.zeros((self.size, m))
        for i in range(self.size):
            np.add.at(Gm[i], self.cidx[i], self.cval[i])
        return Gm


def network_polytope(blocks: AdmittanceBlocks) -> Polytope:
    """Voltage boxes and branch polygons as sparse half-planes in reduced coordinates.

    Branches with ``s_max >= UNLIMITED`` (bus splits) are left out.
    """
    net = blocks.network
    n = blocks.n
    red = {int(c): k for k, c in enumerate(blocks.reduced)}
    cidx, cval, rhs, labels = [], [], [], []
    for b, bus in enumerate(net.buses):
        if b == blocks.slack_pos:
            continue
        k = red[n + b]
        cidx.append([k, 0, 0, 0]); cval.append([1.0, 0.0, 0.0, 0.0]); rhs.append(bus.v_max)
        labels.append(f"v_max[bus {bus.id}]")
        cidx.append([k, 0, 0, 0]); cval.append([-1.0, 0.0, 0.0, 0.0]); rhs.append(-bus.v_min)
        labels.append(f"v_min[bus {bus.id}]")
    for br in net.branches:
        if br.s_max >= UNLIMITED:
            continue
        R, X = effective_rx(br, net.split_reactance)
        z2 = R * R + X * X
        r, s = blocks.pos[br.from_bus], blocks.pos[br.to_bus]
        for m in range(br.sides):
            c, sn = math.cos(m * br.alpha), math.sin(m * br.alpha)
            # p cos + q sin as a function of (theta_r, theta_s, v_r, v_s)
            w_th = (X * c - R * sn) / z2
            w_v = (R * c + X * sn) / z2
            terms = [(r, w_th), (s, -w_th), (n + r, w_v), (n + s, -w_v)]
            idx, val = [], []
            const = 0.0
            for col, w in terms:
                if col in red:
                    idx.append(red[col]); val.append(w)
                elif col == n + blocks.slack_pos:
                    const += w  # slack magnitude fixed at 1
            while len(idx) < 4:
                idx.append(0); val.append(0.0)
            cidx.append(idx); cval.append(val); rhs.append(br.s_max - const)
            labels.append(f"polygon[{br.from_bus}-{br.to_bus}, m={m}]")
    return Polytope(np.asarray(cidx, dtype=np.int64).reshape(-1, 4),
                    np.asarray(cval, dtype=float).reshape(-1, 4),
                    np.asarray(rhs, dtype=float), tuple(labels))


def write_lambda_csv(blocks: AdmittanceBlocks, path: str | Path) -> None:
    """Dense ``Lambda`` with a header row and a label column (``theta_<id>``/``v_<id>``)."""
    names = [f"theta_{i}" for i in blocks.ids] + [f"v_{i}" for i in blocks.ids]
    rows = [f"p_{i}" for i in blocks.ids] + [f"q_{i}" for i in blocks.ids]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row"] + names)
        for label, vals in zip(rows, blocks.Lam):
            w.writerow([label] + [repr(float(v)) for v in vals])
