"""Pure numpy implementation of the hot kernels.

Mirrors ``_kernels.pyx`` function for function; ``gridtrade.kernels`` picks
whichever is available. Every routine works on a batch of independent rows so
the Python overhead is paid once per call, not once per appliance.

Kernel ids: 0 is ``log1p``, 1 is ``sqrt_shift``.
"""
from __future__ import annotations

import numpy as np

SQRT_EPS = 1e-6
_BISECT_ITERS = 200


def _fprime0(kid):
    return np.where(kid == 0, 1.0, 0.5 / np.sqrt(SQRT_EPS))


def fprime(x, kid):
    """Derivative of the utility kernel with the linear extension below zero."""
    x = np.asarray(x, dtype=float)
    xp = np.maximum(x, 0.0)
    val = np.where(kid == 0, 1.0 / (1.0 + xp), 0.5 / np.sqrt(xp + SQRT_EPS))
    return val


def marginal_inverse(price, kappa, kid):
    """Solve ``kappa * f'(x) = price`` for ``x`` on the concave kernel.

    Returns ``+inf`` when consuming more is always worth it and ``-inf`` when
    the marginal utility never reaches the price. Ties at zero marginal value
    resolve to ``-inf`` so the caller lands on the lower bound.
    """
    price = np.asarray(price, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    kid = np.broadcast_to(kid, np.broadcast_shapes(price.shape, kappa.shape, np.shape(kid)))
    out = np.empty(np.broadcast_shapes(price.shape, kappa.shape), dtype=float)
    out[...] = 0.0
    pos = kappa > 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.where(pos, price / np.where(pos, kappa, 1.0), 0.0)
        f0 = _fprime0(kid)
        ys = np.maximum(y, 1e-300)
        x = np.where(kid == 0, 1.0 / ys - 1.0, 0.25 / (ys * ys) - SQRT_EPS)
    x = np.where(y <= 0.0, np.inf, x)
    x = np.where(y > f0, -np.inf, x)
    x = np.where(y == f0, 0.0, x)
    out = np.where(pos, x, np.where(price < 0.0, np.inf, -np.inf))
    return out


def _type1_rows(price, lo, hi, inmask, kappa, band_lo, band_hi, offset, kid):
    k_rows, n_slots = price.shape
    inm = inmask.astype(bool)
    cap = np.where(inm, hi - lo, 0.0)
    s0 = np.where(inm, lo, 0.0).sum(axis=1)
    smin = np.maximum(band_lo, s0)
    smax = np.minimum(band_hi, s0 + cap.sum(axis=1))
    bad = smin > smax + 1e-9 * (1.0 + np.abs(smax))
    if np.any(bad):
        raise ValueError(f"empty feasible set for cohort rows {np.flatnonzero(bad).tolist()}")
    smin = np.minimum(smin, smax)
    key = np.where(inm & (cap > 0.0), price, np.inf)
    order = np.argsort(key, axis=1, kind="stable")
    rows = np.arange(k_rows)[:, None]
    p_sorted = price[rows, order]
    c_sorted = cap[rows, order]
    after = s0[:, None] + np.cumsum(c_sorted, axis=1)
    before = after - c_sorted
    kap = kappa[:, :1]
    x_int = marginal_inverse(p_sorted, np.broadcast_to(kap, p_sorted.shape), kid[:, None])
    s_int = x_int - offset[:, None]
    s_j = np.clip(s_int, before, after)
    partial = (s_j < after) & (c_sorted > 0.0)
    has = partial.any(axis=1)
    first = np.argmax(partial, axis=1)
    s_unc = np.where(has, s_j[np.arange(k_rows), first], s0 + cap.sum(axis=1))
    s_star = np.clip(s_unc, smin, smax)
    fill = np.clip(s_star[:, None] - before, 0.0, c_sorted)
    # tied prices share the fill in proportion to capacity
    for r in range(k_rows):
        ps = p_sorted[r]
        cs = c_sorted[r]
        j = 0
        while j < n_slots:
            if cs[j] <= 0.0:
                j += 1
                continue
            m = j + 1
            while m < n_slots and cs[m] > 0.0 and ps[m] == ps[j]:
                m += 1
            if m - j > 1:
                tot = fill[r, j:m].sum()
                ctot = cs[j:m].sum()
                fill[r, j:m] = cs[j:m] * (tot / ctot)
            j = m
    e = lo.copy()
    e[rows, order] += fill
    return e


def _bisect_rows(eval_rows, s_at, in_count_mask, target, a, b):
    """Bisection on a nonincreasing sum ``S(nu)`` with bracket ``S(a) >= target >= S(b)``."""
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (a + b)
        smid = s_at(mid)
        up = smid >= target
        a = np.where(up, mid, a)
        b = np.where(up, b, mid)
        if np.all(b - a <= 1e-15 * np.maximum(1.0, np.abs(a) + np.abs(b))):
            break
    ea = eval_rows(a)
    eb = eval_rows(b)
    sa = (ea * in_count_mask).sum(axis=1)
    sb = (eb * in_count_mask).sum(axis=1)
    gap = sa - sb
    w = np.where(gap > 0.0, (sa - target) / np.where(gap > 0.0, gap, 1.0), 0.0)
    w = np.clip(w, 0.0, 1.0)
    return ea + w[:, None] * (eb - ea)


def _expand(s_at, target, a, b, lower):
    """Widen a bracket until the sum condition holds at the moving end."""
    for _ in range(200):
        if lower:
            ok = s_at(a) >= target
            if np.all(ok):
                break
            a = np.where(ok, a, a - np.maximum(1.0, 2.0 * np.abs(a)))
        else:
            ok = s_at(b) <= target
            if np.all(ok):
                break
            b = np.where(ok, b, b + np.maximum(1.0, 2.0 * np.abs(b)))
    return a, b


def _separable_rows(price, lo, hi, inmask, kappa, shift, band_lo, band_hi, kid):
    inm = inmask.astype(float)
    kidc = kid[:, None]

    def evaluate(nu_rows, p=price, lo_=lo, hi_=hi, kap=kappa, sh=shift, im=inm, kk=kidc):
        x = marginal_inverse(p + nu_rows[:, None] * im, kap, kk)
        return np.clip(sh + x, lo_, hi_)

    e = evaluate(np.zeros(price.shape[0]))
    s = (e * inm).sum(axis=1)
    s_lo = (lo * inm).sum(axis=1)
    s_hi = (hi * inm).sum(axis=1)
    smin = np.maximum(band_lo, s_lo)
    smax = np.minimum(band_hi, s_hi)
    bad = smin > smax + 1e-9 * (1.0 + np.abs(smax))
    if np.any(bad):
        raise ValueError(f"empty feasible set for cohort rows {np.flatnonzero(bad).tolist()}")
    smin = np.minimum(smin, smax)
    for sign in (1, -1):
        rows = np.flatnonzero(s > smax) if sign > 0 else np.flatnonzero(s < smin)
        if rows.size == 0:
            continue
        sub = dict(p=price[rows], lo_=lo[rows], hi_=hi[rows], kap=kappa[rows],
                   sh=shift[rows], im=inm[rows], kk=kidc[rows])

        def ev(nu, sub=sub):
            return evaluate(nu, **sub)

        def s_at(nu, sub=sub):
            return (ev(nu) * sub["im"]).sum(axis=1)

        kap = kappa[rows]
        if sign > 0:
            target = smax[rows]
            x0 = np.maximum(lo[rows] - shift[rows], 0.0)
            m = kap * fprime(x0, kidc[rows]) - price[rows]
            m = np.where(inm[rows] > 0, m, -np.inf)
            a = np.zeros(rows.size)
            b = np.maximum(m.max(axis=1), 0.0) + 1e-12
            a, b = _expand(s_at, target, a, b, lower=False)
        else:
            target = smin[rows]
            x1 = np.maximum(hi[rows] - shift[rows], 0.0)
            m = kap * fprime(x1, kidc[rows]) - price[rows]
            m = np.where(inm[rows] > 0, m, np.inf)
            b = np.zeros(rows.size)
            a = np.minimum(m.min(axis=1), 0.0) - 1e-12
            a, b = _expand(s_at, target, a, b, lower=True)
        e[rows] = _bisect_rows(ev, s_at, inm[rows], target, a, b)
    return e


def solve_cohorts(price, lo, hi, inmask, kappa, shift, band_lo, band_hi, ctype, offset, kid):
    """Exact best response of a batch of appliance cohorts to per-slot prices.

    Parameters
    ----------
    price, lo, hi, kappa, shift : ndarray, shape (K, T)
        Per-unit price, box bounds, utility weight and kernel shift per slot.
    inmask : ndarray of uint8, shape (K, T)
        1 on slots of the scheduling window (the energy band applies there).
    band_lo, band_hi : ndarray, shape (K,)
        Bounds on the summed in-window consumption; ``+-inf`` when absent.
    ctype : ndarray of int, shape (K,)
        Appliance type (1, 2 or 3).
    offset : ndarray, shape (K,)
        Type 1 only: utility argument is ``offset + sum(e in window)``.
    kid : ndarray of int, shape (K,)
        Utility kernel id.

    Returns
    -------
    ndarray, shape (K, T)
    """
    price = np.ascontiguousarray(price, dtype=float)
    e = np.empty_like(price)
    ctype = np.asarray(ctype)
    kid = np.asarray(kid, dtype=np.int64)
    t1 = np.flatnonzero(ctype == 1)
    t23 = np.flatnonzero(ctype != 1)
    if t1.size:
        e[t1] = _type1_rows(price[t1], lo[t1], hi[t1], inmask[t1], kappa[t1],
                            band_lo[t1], band_hi[t1], offset[t1], kid[t1])
    if t23.size:
        e[t23] = _separable_rows(price[t23], lo[t23], hi[t23], inmask[t23], kappa[t23],
                                 shift[t23], band_lo[t23], band_hi[t23], kid[t23])
    return e


def solve_type1_prox(price, lo, hi, inmask, kappa, band_lo, band_hi, offset, kid, e0, tau):
    """Proximal best response of type-1 cohorts.

    Maximizes ``kappa f(offset + sum(e in window)) - price . e - |e - e0|^2 / (2 tau)``
    over the box and the energy band, row by row. The optimum has the form
    ``e = clip(e0 + tau (g - price))`` for a scalar ``g``, found by bisection
    on ``kappa f'(S(g) + offset) = g`` and, if the band binds, on
    ``S(g) = band edge``. Slots outside the window sit at ``lo``.

    Parameters
    ----------
    kappa, band_lo, band_hi, offset : ndarray, shape (K,)
    e0 : ndarray, shape (K, T)
        Proximal center (the previous decision).
    tau : float
        Proximal step; larger means closer to the exact best response.
    """
    price = np.asarray(price, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    inm = np.asarray(inmask).astype(bool)
    kappa = np.asarray(kappa, dtype=float)
    kid = np.asarray(kid, dtype=np.int64)
    e0 = np.asarray(e0, dtype=float)
    K = price.shape[0]
    if K == 0:
        return np.zeros_like(price)

    def e_at(g):
        e = np.clip(e0 + tau * (g[:, None] - price), lo, hi)
        return np.where(inm, e, lo)

    def s_at(g):
        return np.where(inm, e_at(g), 0.0).sum(axis=1)

    smin = np.where(inm, lo, 0.0).sum(axis=1)
    smax = np.where(inm, hi, 0.0).sum(axis=1)
    blo = np.maximum(band_lo, smin)
    bhi = np.minimum(band_hi, smax)
    bad = blo > bhi + 1e-9 * (1.0 + np.abs(bhi))
    if np.any(bad):
        raise ValueError(f"empty feasible set for cohort rows {np.flatnonzero(bad).tolist()}")
    big = np.where(inm, np.abs(price) + np.abs(e0 - lo) / tau + np.abs(hi - e0) / tau, 0.0).max(axis=1)
    fmax = kappa * fprime(smin + offset, kid)
    a = -big - np.abs(fmax) - 1.0
    b = big + np.abs(fmax) + 1.0
    # stationary g: kappa f'(S(g) + offset) - g is decreasing in g
    lo_g, hi_g = a.copy(), b.copy()
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (lo_g + hi_g)
        pos = kappa * fprime(s_at(mid) + offset, kid) - mid > 0.0
        lo_g = np.where(pos, mid, lo_g)
        hi_g = np.where(pos, hi_g, mid)
        if np.all(hi_g - lo_g <= 1e-15 * np.maximum(1.0, np.abs(lo_g) + np.abs(hi_g))):
            break
    g = 0.5 * (lo_g + hi_g)
    S = s_at(g)
    for edge, over in ((bhi, S > bhi), (blo, S < blo)):
        if not over.any():
            continue
        ga, gb = a.copy(), b.copy()
        for _ in range(_BISECT_ITERS):
            mid = 0.5 * (ga + gb)
            up = s_at(mid) >= edge
            gb = np.where(up, mid, gb)
            ga = np.where(up, ga, mid)
            if np.all(gb - ga <= 1e-15 * np.maximum(1.0, np.abs(ga) + np.abs(gb))):
                break
        g = np.where(over, 0.5 * (ga + gb), g)
    return e_at(g)


def project_box_band(z, lo, hi, inmask, band_lo, band_hi):
    """Euclidean projection of each row onto its box intersected with the energy band."""
    z = np.asarray(z, dtype=float)
    inm = inmask.astype(float)
    e = np.clip(z, lo, hi)
    s = (e * inm).sum(axis=1)
    s_lo = (lo * inm).sum(axis=1)
    s_hi = (hi * inm).sum(axis=1)
    smin = np.minimum(np.maximum(band_lo, s_lo), np.minimum(band_hi, s_hi))
    smax = np.minimum(band_hi, s_hi)
    for sign in (1, -1):
        rows = np.flatnonzero(s > smax) if sign > 0 else np.flatnonzero(s < smin)
        if rows.size == 0:
            continue
        zr, lr, hr, ir = z[rows], lo[rows], hi[rows], inm[rows]

        def ev(nu, zr=zr, lr=lr, hr=hr, ir=ir):
            return np.clip(zr - nu[:, None] * ir, lr, hr)

        def s_at(nu, ir=ir):
            return (ev(nu) * ir).sum(axis=1)

        if sign > 0:
            target = smax[rows]
            a = np.zeros(rows.size)
            b = np.maximum(np.where(ir > 0, zr - lr, -np.inf).max(axis=1), 0.0)
        else:
            target = smin[rows]
            b = np.zeros(rows.size)
            a = np.minimum(np.where(ir > 0, zr - hr, np.inf).min(axis=1), 0.0)
        e[rows] = _bisect_rows(ev, s_at, ir, target, a, b)
    return e


def hildreth(x0, cidx, cval, rhs, dirs, wdiag, tol=1e-10, max_sweeps=20000):
    """Project each row of ``x0`` onto ``{x : g_i.x <= rhs_i}`` in a fixed metric.

    ``g_i`` is sparse (``cidx``/``cval``, four entries), ``dirs[i]`` is
    ``M^{-1} g_i`` and ``wdiag[i]`` is ``g_i . M^{-1} g_i`` for the metric
    ``M``. Works on an active working set and re-checks every constraint
    before returning.

    Returns
    -------
    x : ndarray, shape (T, m)
    sweeps : int
        Largest number of sweeps used over the rows.
    """
    x = np.array(x0, dtype=float, copy=True)
    n_con = rhs.shape[0]
    used = 0
    if n_con == 0:
        return x, 0
    for t in range(x.shape[0]):
        xt = x[t]
        s = np.zeros(n_con)
        sweeps = 0
        settled = True
        while sweeps < max_sweeps:
            viol = (cval * xt[cidx]).sum(axis=1) - rhs
            outside = viol > tol * (1.0 + np.abs(rhs))
            if settled and not outside.any():
                break
            work = np.flatnonzero(outside | (s > 0.0))
            change = 0.0
            for _ in range(50):
                change = 0.0
                for i in work:
                    gi = float(np.dot(cval[i], xt[cidx[i]]))
                    new = max(0.0, s[i] + (gi - rhs[i]) / wdiag[i])
                    delta = new - s[i]
                    if delta != 0.0:
                        s[i] = new
                        xt -= delta * dirs[i]
                        change = max(change, abs(delta) * float(np.abs(dirs[i]).max()))
                sweeps += 1
                if change <= tol:
                    break
            settled = change <= tol
        used = max(used, sweeps)
    return x, used
