# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: appliance best responses and polytope projections.

Same contracts as ``gridtrade._fallback``; loops run without the GIL so the
market can solve aggregators on a thread pool.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, INFINITY
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef double SQRT_EPS = 1e-6
cdef int BISECT_ITERS = 200


cdef inline double _fprime(double x, long kid) noexcept nogil:
    if x < 0.0:
        x = 0.0
    if kid == 0:
        return 1.0 / (1.0 + x)
    return 0.5 / sqrt(x + SQRT_EPS)


cdef inline double _fprime0(long kid) noexcept nogil:
    if kid == 0:
        return 1.0
    return 0.5 / sqrt(SQRT_EPS)


cdef inline double _minv(double price, double kappa, long kid) noexcept nogil:
    cdef double y, f0
    if kappa <= 0.0:
        if price < 0.0:
            return INFINITY
        return -INFINITY
    y = price / kappa
    if y <= 0.0:
        return INFINITY
    f0 = _fprime0(kid)
    if y > f0:
        return -INFINITY
    if y == f0:
        return 0.0
    if kid == 0:
        return 1.0 / y - 1.0
    return 0.25 / (y * y) - SQRT_EPS


cdef inline double _clip(double x, double a, double b) noexcept nogil:
    if x < a:
        return a
    if x > b:
        return b
    return x


cdef int _type1_row(double[::1] price, double[::1] lo, double[::1] hi,
                    unsigned char[::1] inm, double kappa, double blo, double bhi,
                    double offset, long kid, double[::1] out,
                    long* order, double* fill) noexcept nogil:
    cdef Py_ssize_t n = price.shape[0]
    cdef Py_ssize_t i, j, m, key_i
    cdef double s0 = 0.0, captot = 0.0, smin, smax, cap, before, after
    cdef double s_unc, s_star, sj, tot, ctot, pkey
    cdef int found = 0
    cdef Py_ssize_t cnt = 0
    for i in range(n):
        out[i] = lo[i]
        if inm[i]:
            s0 += lo[i]
            cap = hi[i] - lo[i]
            if cap > 0.0:
                captot += cap
                order[cnt] = i
                cnt += 1
    smin = blo if blo > s0 else s0
    smax = bhi if bhi < s0 + captot else s0 + captot
    if smin > smax + 1e-9 * (1.0 + fabs(smax)):
        return 1
    if smin > smax:
        smin = smax
    # stable insertion sort of free slots by price
    for i in range(1, cnt):
        key_i = order[i]
        pkey = price[key_i]
        j = i - 1
        while j >= 0 and price[order[j]] > pkey:
            order[j + 1] = order[j]
            j -= 1
        order[j + 1] = key_i
    before = s0
    s_unc = s0 + captot
    for j in range(cnt):
        i = order[j]
        cap = hi[i] - lo[i]
        after = before + cap
        sj = _clip(_minv(price[i], kappa, kid) - offset, before, after)
        if sj < after:
            s_unc = sj
            found = 1
            break
        before = after
    s_star = _clip(s_unc, smin, smax)
    before = s0
    for j in range(cnt):
        i = order[j]
        cap = hi[i] - lo[i]
        fill[j] = _clip(s_star - before, 0.0, cap)
        before += cap
    j = 0
    while j < cnt:
        m = j + 1
        while m < cnt and price[order[m]] == price[order[j]]:
            m += 1
        if m - j > 1:
            tot = 0.0
            ctot = 0.0
            for i in range(j, m):
                tot += fill[i]
                ctot += hi[order[i]] - lo[order[i]]
            for i in range(j, m):
                fill[i] = (hi[order[i]] - lo[order[i]]) * (tot / ctot)
        j = m
    for j in range(cnt):
        i = order[j]
        out[i] = lo[i] + fill[j]
    return 0


cdef double _sep_sum(double nu, double[::1] price, double[::1] lo, double[::1] hi,
                     unsigned char[::1] inm, double[::1] kappa, double[::1] shift,
                     long kid, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i, n = price.shape[0]
    cdef double s = 0.0, p
    for i in range(n):
        p = price[i]
        if inm[i]:
            p = p + nu
        out[i] = _clip(shift[i] + _minv(p, kappa[i], kid), lo[i], hi[i])
        if inm[i]:
            s += out[i]
    return s


cdef int _separable_row(double[::1] price, double[::1] lo, double[::1] hi,
                        unsigned char[::1] inm, double[::1] kappa, double[::1] shift,
                        double blo, double bhi, long kid, double[::1] out,
                        double[::1] tmp) noexcept nogil:
    cdef Py_ssize_t i, n = price.shape[0]
    cdef double slo = 0.0, shi = 0.0, smin, smax, s, target, a, b, mid, sa, sb, w, mval
    cdef int it, grow
    for i in range(n):
        if inm[i]:
            slo += lo[i]
            shi += hi[i]
    smin = blo if blo > slo else slo
    smax = bhi if bhi < shi else shi
    if smin > smax + 1e-9 * (1.0 + fabs(smax)):
        return 1
    if smin > smax:
        smin = smax
    s = _sep_sum(0.0, price, lo, hi, inm, kappa, shift, kid, out)
    if s > smax:
        target = smax
        a = 0.0
        b = 0.0
        for i in range(n):
            if inm[i]:
                mval = kappa[i] * _fprime(lo[i] - shift[i], kid) - price[i]
                if mval > b:
                    b = mval
        b += 1e-12
        for grow in range(200):
            if _sep_sum(b, price, lo, hi, inm, kappa, shift, kid, tmp) <= target:
                break
            b += 1.0 if 2.0 * fabs(b) < 1.0 else 2.0 * fabs(b)
    elif s < smin:
        target = smin
        a = 0.0
        b = 0.0
        for i in range(n):
            if inm[i]:
                mval = kappa[i] * _fprime(hi[i] - shift[i], kid) - price[i]
                if mval < a:
                    a = mval
        a -= 1e-12
        for grow in range(200):
            if _sep_sum(a, price, lo, hi, inm, kappa, shift, kid, tmp) >= target:
                break
            a -= 1.0 if 2.0 * fabs(a) < 1.0 else 2.0 * fabs(a)
    else:
        return 0
    for it in range(BISECT_ITERS):
        mid = 0.5 * (a + b)
        if _sep_sum(mid, price, lo, hi, inm, kappa, shift, kid, tmp) >= target:
            a = mid
        else:
            b = mid
        if b - a <= 1e-15 * (1.0 if fabs(a) + fabs(b) < 1.0 else fabs(a) + fabs(b)):
            break
    sa = _sep_sum(a, price, lo, hi, inm, kappa, shift, kid, out)
    sb = _sep_sum(b, price, lo, hi, inm, kappa, shift, kid, tmp)
    w = 0.0
    if sa - sb > 0.0:
        w = _clip((sa - target) / (sa - sb), 0.0, 1.0)
    for i in range(n):
        out[i] = out[i] + w * (tmp[i] - out[i])
    return 0


def solve_cohorts(price, lo, hi, inmask, kappa, shift, band_lo, band_hi, ctype, offset, kid):
    """Exact best response of a batch of appliance cohorts; see ``_fallback.solve_cohorts``."""
    cdef double[:, ::1] P = np.ascontiguousarray(price, dtype=np.float64)
    cdef double[:, ::1] LO = np.ascontiguousarray(lo, dtype=np.float64)
    cdef double[:, ::1] HI = np.ascontiguousarray(hi, dtype=np.float64)
    cdef unsigned char[:, ::1] IM = np.ascontiguousarray(inmask, dtype=np.uint8)
    cdef double[:, ::1] KA = np.ascontiguousarray(kappa, dtype=np.float64)
    cdef double[:, ::1] SH = np.ascontiguousarray(shift, dtype=np.float64)
    cdef double[::1] BL = np.ascontiguousarray(band_lo, dtype=np.float64)
    cdef double[::1] BH = np.ascontiguousarray(band_hi, dtype=np.float64)
    cdef long[::1] CT = np.ascontiguousarray(ctype, dtype=np.int64)
    cdef double[::1] OF = np.ascontiguousarray(offset, dtype=np.float64)
    cdef long[::1] KI = np.ascontiguousarray(kid, dtype=np.int64)
    cdef Py_ssize_t K = P.shape[0], T = P.shape[1], r
    out_arr = np.empty((K, T), dtype=np.float64)
    tmp_arr = np.empty(T if T > 0 else 1, dtype=np.float64)
    cdef double[:, ::1] OUT = out_arr
    cdef double[::1] TMP = tmp_arr
    cdef long* order = <long*> malloc((T + 1) * sizeof(long))
    cdef double* fill = <double*> malloc((T + 1) * sizeof(double))
    cdef long bad = -1
    cdef int rc
    try:
        with nogil:
            for r in range(K):
                if CT[r] == 1:
                    rc = _type1_row(P[r], LO[r], HI[r], IM[r], KA[r, 0] if T > 0 else 0.0,
                                    BL[r], BH[r], OF[r], KI[r], OUT[r], order, fill)
                else:
                    rc = _separable_row(P[r], LO[r], HI[r], IM[r], KA[r], SH[r],
                                        BL[r], BH[r], KI[r], OUT[r], TMP)
                if rc != 0 and bad < 0:
                    bad = r
    finally:
        free(order)
        free(fill)
    if bad >= 0:
        raise ValueError(f"empty feasible set for cohort rows [{bad}]")
    return out_arr


cdef double _prox_sum(double g, double[::1] price, double[::1] lo, double[::1] hi,
                      unsigned char[::1] im, double[::1] e0, double tau) noexcept nogil:
    cdef Py_ssize_t i
    cdef double s = 0.0
    for i in range(price.shape[0]):
        if im[i]:
            s += _clip(e0[i] + tau * (g - price[i]), lo[i], hi[i])
    return s


cdef double _prox_edge(double edge, double a, double b, double[::1] price, double[::1] lo,
                       double[::1] hi, unsigned char[::1] im, double[::1] e0, double tau) noexcept nogil:
    cdef int it
    cdef double mid
    for it in range(BISECT_ITERS):
        mid = 0.5 * (a + b)
        if _prox_sum(mid, price, lo, hi, im, e0, tau) >= edge:
            b = mid
        else:
            a = mid
        if b - a <= 1e-15 * max(1.0, fabs(a) + fabs(b)):
            break
    return 0.5 * (a + b)


def solve_type1_prox(price, lo, hi, inmask, kappa, band_lo, band_hi, offset, kid, e0, double tau):
    """Proximal best response of type-1 cohorts; see ``_fallback.solve_type1_prox``."""
    cdef double[:, ::1] P = np.ascontiguousarray(price, dtype=np.float64)
    cdef double[:, ::1] LO = np.ascontiguousarray(lo, dtype=np.float64)
    cdef double[:, ::1] HI = np.ascontiguousarray(hi, dtype=np.float64)
    cdef unsigned char[:, ::1] IM = np.ascontiguousarray(inmask, dtype=np.uint8)
    cdef double[::1] KA = np.ascontiguousarray(kappa, dtype=np.float64)
    cdef double[::1] BL = np.ascontiguousarray(band_lo, dtype=np.float64)
    cdef double[::1] BH = np.ascontiguousarray(band_hi, dtype=np.float64)
    cdef double[::1] OF = np.ascontiguousarray(offset, dtype=np.float64)
    cdef long[::1] KI = np.ascontiguousarray(kid, dtype=np.int64)
    cdef double[:, ::1] E0 = np.ascontiguousarray(e0, dtype=np.float64)
    cdef Py_ssize_t K = P.shape[0], T = P.shape[1], r, i
    out_arr = np.empty((K, T), dtype=np.float64)
    cdef double[:, ::1] OUT = out_arr
    cdef double smin, smax, blo, bhi, big, fmax, a, b, ga, gb, mid, g, S, v
    cdef long bad = -1
    cdef int it
    with nogil:
        for r in range(K):
            smin = 0.0
            smax = 0.0
            big = 0.0
            for i in range(T):
                if IM[r, i]:
                    smin += LO[r, i]
                    smax += HI[r, i]
                    v = fabs(P[r, i]) + fabs(E0[r, i] - LO[r, i]) / tau + fabs(HI[r, i] - E0[r, i]) / tau
                    if v > big:
                        big = v
            blo = max(BL[r], smin)
            bhi = min(BH[r], smax)
            if blo > bhi + 1e-9 * (1.0 + fabs(bhi)):
                if bad < 0:
                    bad = r
                continue
            fmax = KA[r] * _fprime(smin + OF[r], KI[r])
            a = -big - fabs(fmax) - 1.0
            b = big + fabs(fmax) + 1.0
            ga = a
            gb = b
            for it in range(BISECT_ITERS):
                mid = 0.5 * (ga + gb)
                S = _prox_sum(mid, P[r], LO[r], HI[r], IM[r], E0[r], tau)
                if KA[r] * _fprime(S + OF[r], KI[r]) - mid > 0.0:
                    ga = mid
                else:
                    gb = mid
                if gb - ga <= 1e-15 * max(1.0, fabs(ga) + fabs(gb)):
                    break
            g = 0.5 * (ga + gb)
            S = _prox_sum(g, P[r], LO[r], HI[r], IM[r], E0[r], tau)
            if S > bhi:
                g = _prox_edge(bhi, a, b, P[r], LO[r], HI[r], IM[r], E0[r], tau)
            elif S < blo:
                g = _prox_edge(blo, a, b, P[r], LO[r], HI[r], IM[r], E0[r], tau)
            for i in range(T):
                if IM[r, i]:
                    OUT[r, i] = _clip(E0[r, i] + tau * (g - P[r, i]), LO[r, i], HI[r, i])
                else:
                    OUT[r, i] = LO[r, i]
    if bad >= 0:
        raise ValueError(f"empty feasible set for cohort rows [{bad}]")
    return out_arr


def project_box_band(z, lo, hi, inmask, band_lo, band_hi):
    """Euclidean projection onto box intersected with the energy band, row by row."""
    cdef double[:, ::1] Z = np.ascontiguousarray(z, dtype=np.float64)
    cdef double[:, ::1] LO = np.ascontiguousarray(lo, dtype=np.float64)
    cdef double[:, ::1] HI = np.ascontiguousarray(hi, dtype=np.float64)
    cdef unsigned char[:, ::1] IM = np.ascontiguousarray(inmask, dtype=np.uint8)
    cdef double[::1] BL = np.ascontiguousarray(band_lo, dtype=np.float64)
    cdef double[::1] BH = np.ascontiguousarray(band_hi, dtype=np.float64)
    cdef Py_ssize_t K = Z.shape[0], T = Z.shape[1], r, i
    out_arr = np.empty((K, T), dtype=np.float64)
    cdef double[:, ::1] OUT = out_arr
    cdef double s, slo, shi, smin, smax, target, a, b, mid, sm, sa, sb, w, v
    cdef int it
    with nogil:
        for r in range(K):
            s = 0.0
            slo = 0.0
            shi = 0.0
            for i in range(T):
                OUT[r, i] = _clip(Z[r, i], LO[r, i], HI[r, i])
                if IM[r, i]:
                    s += OUT[r, i]
                    slo += LO[r, i]
                    shi += HI[r, i]
            smax = BH[r] if BH[r] < shi else shi
            smin = BL[r] if BL[r] > slo else slo
            if smin > smax:
                smin = smax
            if s > smax:
                target = smax
                a = 0.0
                b = 0.0
                for i in range(T):
                    if IM[r, i] and Z[r, i] - LO[r, i] > b:
                        b = Z[r, i] - LO[r, i]
            elif s < smin:
                target = smin
                a = 0.0
                b = 0.0
                for i in range(T):
                    if IM[r, i] and Z[r, i] - HI[r, i] < a:
                        a = Z[r, i] - HI[r, i]
            else:
                continue
            for it in range(BISECT_ITERS):
                mid = 0.5 * (a + b)
                sm = 0.0
                for i in range(T):
                    if IM[r, i]:
                        sm += _clip(Z[r, i] - mid, LO[r, i], HI[r, i])
                if sm >= target:
                    a = mid
                else:
                    b = mid
                if b - a <= 1e-15 * (1.0 if fabs(a) + fabs(b) < 1.0 else fabs(a) + fabs(b)):
                    break
            sa = 0.0
            sb = 0.0
            for i in range(T):
                if IM[r, i]:
                    sa += _clip(Z[r, i] - a, LO[r, i], HI[r, i])
                    sb += _clip(Z[r, i] - b, LO[r, i], HI[r, i])
            w = 0.0
            if sa - sb > 0.0:
                w = _clip((sa - target) / (sa - sb), 0.0, 1.0)
            for i in range(T):
                if IM[r, i]:
                    v = _clip(Z[r, i] - a, LO[r, i], HI[r, i])
                    OUT[r, i] = v + w * (_clip(Z[r, i] - b, LO[r, i], HI[r, i]) - v)
    return out_arr


def hildreth(x0, cidx, cval, rhs, dirs, wdiag, double tol=1e-10, long max_sweeps=20000):
    """Metric projection onto a half-plane intersection; see ``_fallback.hildreth``."""
    x_arr = np.array(x0, dtype=np.float64, copy=True, order="C")
    cdef double[:, ::1] X = x_arr
    cdef long[:, ::1] CI = np.ascontiguousarray(cidx, dtype=np.int64)
    cdef double[:, ::1] CV = np.ascontiguousarray(cval, dtype=np.float64)
    cdef double[::1] H = np.ascontiguousarray(rhs, dtype=np.float64)
    cdef double[:, ::1] D = np.ascontiguousarray(dirs, dtype=np.float64)
    cdef double[::1] W = np.ascontiguousarray(wdiag, dtype=np.float64)
    cdef Py_ssize_t T = X.shape[0], m = X.shape[1], N = H.shape[0], t, i, j, k
    cdef Py_ssize_t width = CI.shape[1] if N > 0 else 0
    s_arr = np.zeros(N if N > 0 else 1, dtype=np.float64)
    dmax_arr = np.abs(np.asarray(dirs)).max(axis=1) if N > 0 else np.zeros(1)
    cdef double[::1] S = s_arr
    cdef double[::1] DM = np.ascontiguousarray(dmax_arr, dtype=np.float64)
    cdef double gi, new, delta, change, c
    cdef long sweep, used = 0
    if N == 0:
        return x_arr, 0
    with nogil:
        for t in range(T):
            for i in range(N):
                S[i] = 0.0
            for sweep in range(max_sweeps):
                change = 0.0
                for i in range(N):
                    gi = 0.0
                    for k in range(width):
                        gi += CV[i, k] * X[t, CI[i, k]]
                    new = S[i] + (gi - H[i]) / W[i]
                    if new < 0.0:
                        new = 0.0
                    delta = new - S[i]
                    if delta != 0.0:
                        S[i] = new
                        for j in range(m):
                            X[t, j] -= delta * D[i, j]
                        c = fabs(delta) * DM[i]
                        if c > change:
                            change = c
                if sweep + 1 > used:
                    used = sweep + 1
                if change <= tol:
                    break
    return x_arr, used
