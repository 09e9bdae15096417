# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled batch kernels.

Same interface, variate layout and formulas as ``_kernels_py``; one path at a
time with the GIL released.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, sqrt
from libc.stdint cimport int64_t, uint8_t, uint32_t, uint64_t
from libc.stdlib cimport free, malloc
from scipy.special.cython_special cimport ndtr, ndtri

cnp.import_array()

BACKEND = "cython"

cdef enum:
    PATHWISE = 0
    COND_EXP = 1
    SPLIT = 2
    VIBRATO = 3

cdef enum:
    CALL = 0
    DIGITAL = 1
    LOOKBACK = 2
    BARRIER = 3
    BARRIER_SMOOTH = 4
    UNIT = 5

cdef enum:
    TAG_PATH = 0
    TAG_SPLIT = 1
    TAG_BRIDGE = 2

cdef double INV_SQRT_2PI = 0.3989422804014327


# -- Philox4x32-10 -------------------------------------------------------------

cdef inline void philox(uint32_t* c, uint32_t k0, uint32_t k1) noexcept nogil:
    cdef uint64_t p0, p1
    cdef uint32_t c0 = c[0], c1 = c[1], c2 = c[2], c3 = c[3]
    cdef int rnd
    for rnd in range(10):
        if rnd:
            k0 = k0 + <uint32_t>0x9E3779B9
            k1 = k1 + <uint32_t>0xBB67AE85
        p0 = <uint64_t>0xD2511F53 * c0
        p1 = <uint64_t>0xCD9E8D57 * c2
        c0 = <uint32_t>(p1 >> 32) ^ c1 ^ k0
        c1 = <uint32_t>p1
        c2 = <uint32_t>(p0 >> 32) ^ c3 ^ k1
        c3 = <uint32_t>p0
    c[0] = c0
    c[1] = c1
    c[2] = c2
    c[3] = c3


cdef inline double to_unit(uint32_t hi, uint32_t lo) noexcept nogil:
    return ((<double>(hi >> 5)) * 67108864.0 + <double>(lo >> 6) + 0.5) * (1.0 / 9007199254740992.0)


cdef void fill_uniforms(double* out, int count, uint64_t seed, int level, uint64_t path,
                        int tag) noexcept nogil:
    cdef uint32_t c[4]
    cdef uint32_t k0 = <uint32_t>seed, k1 = <uint32_t>(seed >> 32)
    cdef uint32_t w1 = <uint32_t>path
    cdef uint32_t w2 = <uint32_t>(path >> 32) | (<uint32_t>level << 16) | (<uint32_t>tag << 24)
    cdef int j
    for j in range(0, count, 2):
        c[0] = <uint32_t>(j >> 1)
        c[1] = w1
        c[2] = w2
        c[3] = 0
        philox(c, k0, k1)
        out[j] = to_unit(c[0], c[1])
        if j + 1 < count:
            out[j + 1] = to_unit(c[2], c[3])


cdef void fill_normals(double* out, int count, uint64_t seed, int level, uint64_t path,
                       int tag) noexcept nogil:
    cdef int j
    fill_uniforms(out, count, seed, level, path, tag)
    for j in range(count):
        out[j] = ndtri(out[j])


# -- primitives ------------------------------------------------------------------

cdef struct St:
    double s
    double d0
    double ds


cdef struct Mkt:
    double S0, K, r, sigma, B, h_star


cdef inline St milstein(St x, double dw, double h, const Mkt* m) noexcept nogil:
    cdef double sig = m.sigma
    cdef double D = 1.0 + m.r * h + sig * dw + 0.5 * sig * sig * (dw * dw - h)
    cdef St y
    y.s = x.s * D
    y.d0 = x.d0 * D
    y.ds = x.ds * D + x.s * (dw + sig * (dw * dw - h))
    return y


cdef inline St initial(const Mkt* m) noexcept nogil:
    cdef St x
    x.s = m.S0
    x.d0 = 1.0
    x.ds = 0.0
    return x


cdef inline void call_condexp(double a, double b, double K, double* v, double* da,
                              double* db) noexcept nogil:
    cdef double z, pdf, cdf
    if b > 0.0:
        z = (a - K) / b
        pdf = INV_SQRT_2PI * exp(-0.5 * z * z)
        cdf = ndtr(z)
        v[0] = b * pdf + (a - K) * cdf
        da[0] = cdf
        db[0] = pdf
    else:
        v[0] = a - K if a > K else 0.0
        da[0] = 1.0 if a > K else 0.0
        db[0] = 0.0


cdef inline void digital_condexp(double a, double b, double K, double* v, double* da,
                                 double* db) noexcept nogil:
    cdef double z, pdf
    if b > 0.0:
        z = (a - K) / b
        pdf = INV_SQRT_2PI * exp(-0.5 * z * z)
        v[0] = ndtr(z)
        da[0] = pdf / b
        db[0] = -z * pdf / b
    else:
        v[0] = 1.0 if a > K else 0.0
        da[0] = 0.0
        db[0] = 0.0


cdef inline void bridge_min(St a, St c, St anchor, double h, double u, const Mkt* m,
                            St* out) noexcept nogil:
    """Bridge minimum with tangents; b = sigma * anchor.s."""
    cdef double sig = m.sigma
    cdef double b = sig * anchor.s
    cdef double diff = c.s - a.s
    cdef double lu = log(u)
    cdef double root = sqrt(diff * diff - 2.0 * b * b * h * lu)
    cdef double ratio = 0.0, dmb = 0.0
    if root > 0.0:
        ratio = diff / root
        dmb = b * h * lu / root
    cdef double dl = 0.5 * (1.0 + ratio), dr = 0.5 * (1.0 - ratio)
    out.s = 0.5 * (a.s + c.s - root)
    out.d0 = dl * a.d0 + dr * c.d0 + dmb * sig * anchor.d0
    out.ds = dl * a.ds + dr * c.ds + dmb * (anchor.s + sig * anchor.ds)


cdef inline void survive(St a, St c, St anchor, double h, const Mkt* m, St* prod) noexcept nogil:
    """Multiply the survival product (with tangents) by 1 - p over one bridge."""
    cdef double sig = m.sigma
    cdef double b = sig * anchor.s
    cdef double x = a.s - m.B
    cdef double y = c.s - m.B
    cdef double p, q, scale, dl, dr, db, dp0, dps, keep
    if x < 0.0:
        x = 0.0
    if y < 0.0:
        y = 0.0
    if b != 0.0:
        q = 2.0 * x * y / (b * b * h)
        p = exp(-q)
        scale = -2.0 * p / (b * b * h)
        dl = scale * y if x > 0.0 else 0.0
        dr = scale * x if y > 0.0 else 0.0
        db = 2.0 * p * q / b
    else:
        p = 1.0 if (x <= 0.0 or y <= 0.0) else 0.0
        dl = 0.0
        dr = 0.0
        db = 0.0
    dp0 = dl * a.d0 + dr * c.d0 + db * sig * anchor.d0
    dps = dl * a.ds + dr * c.ds + db * (anchor.s + sig * anchor.ds)
    keep = 1.0 - p
    prod.d0 = prod.d0 * keep - prod.s * dp0
    prod.ds = prod.ds * keep - prod.s * dps
    prod.s = prod.s * keep


cdef inline void terminal(int payoff, St x, const Mkt* m, St* out) noexcept nogil:
    cdef double sh, v, da, db, dvds
    if payoff == BARRIER_SMOOTH:
        sh = sqrt(m.h_star)
        call_condexp(x.s, m.sigma * sh * x.s, m.K, &v, &da, &db)
        dvds = da + db * m.sigma * sh
        out.s = v
        out.d0 = dvds * x.d0
        out.ds = dvds * x.ds + db * sh * x.s
    elif x.s > m.K:
        out.s = x.s - m.K
        out.d0 = x.d0
        out.ds = x.ds
    else:
        out.s = 0.0
        out.d0 = 0.0
        out.ds = 0.0


cdef inline void take_min(St cand, St* best, bint* have) noexcept nogil:
    if not have[0] or cand.s < best.s:
        best[0] = cand
        have[0] = True


cdef inline St finish(int payoff, St x, St best, St prod, const Mkt* m) noexcept nogil:
    cdef St out, t
    if payoff == LOOKBACK:
        out.s = x.s - best.s
        out.d0 = x.d0 - best.d0
        out.ds = x.ds - best.ds
        return out
    terminal(payoff, x, m, &t)
    if payoff == CALL:
        return t
    out.s = t.s * prod.s
    out.d0 = t.d0 * prod.s + t.s * prod.d0
    out.ds = t.ds * prod.s + t.s * prod.ds
    return out


cdef St pathwise_fine(int payoff, const double* dW, const double* U, const double* hf, int nf,
                      const Mkt* m) noexcept nogil:
    cdef St x = initial(m), x1, cand, best, prod
    cdef bint have = False
    cdef int j
    best.s = 0.0
    best.d0 = 0.0
    best.ds = 0.0
    prod.s = 1.0
    prod.d0 = 0.0
    prod.ds = 0.0
    for j in range(nf):
        x1 = milstein(x, dW[j], hf[j], m)
        if payoff == LOOKBACK:
            bridge_min(x, x1, x, hf[j], U[j], m, &cand)
            take_min(cand, &best, &have)
        elif payoff == BARRIER or payoff == BARRIER_SMOOTH:
            survive(x, x1, x, hf[j], m, &prod)
        x = x1
    return finish(payoff, x, best, prod, m)


cdef St pathwise_coarse(int payoff, const double* dW, const double* U, const double* hf,
                        const double* hc, int nc, const Mkt* m) noexcept nogil:
    cdef St x = initial(m), x1, mid, cand, best, prod
    cdef bint have = False
    cdef int k
    cdef double dw1, dw2, w, coef, sig = m.sigma
    best.s = 0.0
    best.d0 = 0.0
    best.ds = 0.0
    prod.s = 1.0
    prod.d0 = 0.0
    prod.ds = 0.0
    for k in range(nc):
        dw1 = dW[2 * k]
        dw2 = dW[2 * k + 1]
        x1 = milstein(x, dw1 + dw2, hc[k], m)
        if payoff != CALL:
            w = hf[2 * k] / hc[k]
            coef = -0.5 * (dw2 - dw1) + (0.5 - w) * (dw1 + dw2)
            mid.s = x.s + w * (x1.s - x.s) + sig * x.s * coef
            mid.d0 = x.d0 + w * (x1.d0 - x.d0) + sig * x.d0 * coef
            mid.ds = x.ds + w * (x1.ds - x.ds) + (x.s + sig * x.ds) * coef
            if payoff == LOOKBACK:
                bridge_min(x, mid, x, hf[2 * k], U[2 * k], m, &cand)
                take_min(cand, &best, &have)
                bridge_min(mid, x1, x, hf[2 * k + 1], U[2 * k + 1], m, &cand)
                take_min(cand, &best, &have)
            else:
                survive(x, mid, x, hf[2 * k], m, &prod)
                survive(mid, x1, x, hf[2 * k + 1], m, &prod)
        x = x1
    return finish(payoff, x, best, prod, m)


cdef inline double vibrato_payoff(int payoff, double ST, double K) noexcept nogil:
    if payoff == CALL:
        return ST - K if ST > K else 0.0
    if payoff == DIGITAL:
        return 1.0 if ST > K else 0.0
    return 1.0


cdef bint final_step(int method, int payoff, St x, double growth, double dgrowth_dsig,
                     double h_rem, const double* Z, int d, bint baseline, const Mkt* m,
                     St* out) noexcept nogil:
    """Smoothed last step; returns False for a degenerate (beta <= 0) sample."""
    cdef double sh = sqrt(h_rem), sig = m.sigma
    cdef double alpha = growth * x.s
    cdef double a0 = growth * x.d0, a_s = growth * x.ds + dgrowth_dsig * x.s
    cdef double beta = sig * sh * x.s
    cdef double b0 = sig * sh * x.d0, b_s = sh * x.s + sig * sh * x.ds
    cdef double v, da, db, ST, z, P, acc_v = 0.0, acc_0 = 0.0, acc_s = 0.0
    cdef double acc_mu = 0.0, acc_sig = 0.0, P0 = 0.0
    cdef int i
    if method == COND_EXP:
        if payoff == CALL:
            call_condexp(alpha, beta, m.K, &v, &da, &db)
        else:
            digital_condexp(alpha, beta, m.K, &v, &da, &db)
        out.s = v
        out.d0 = da * a0 + db * b0
        out.ds = da * a_s + db * b_s
        return True
    if method == SPLIT:
        for i in range(d):
            z = Z[i]
            ST = alpha + beta * z
            if ST > m.K:
                acc_v += ST - m.K
                acc_0 += a0 + b0 * z
                acc_s += a_s + b_s * z
        out.s = acc_v / d
        out.d0 = acc_0 / d
        out.ds = acc_s / d
        return True
    if not beta > 0.0:
        out.s = 0.0
        out.d0 = 0.0
        out.ds = 0.0
        return False
    if baseline:
        P0 = vibrato_payoff(payoff, alpha, m.K)
    for i in range(d):
        z = Z[i]
        P = vibrato_payoff(payoff, alpha + beta * z, m.K)
        acc_v += P
        acc_mu += (P - P0) * z
        acc_sig += (P - P0) * (z * z - 1.0)
    acc_mu = acc_mu / d / beta
    acc_sig = acc_sig / d / beta
    out.s = acc_v / d
    out.d0 = a0 * acc_mu + b0 * acc_sig
    out.ds = a_s * acc_mu + b_s * acc_sig
    return True


def level_samples(int method, int payoff, double S0, double K, double r, double sigma, B,
                  double h_star, int d, hf, hc, seed, int level, start, int n,
                  bint baseline=True):
    """Fine and coarse (value, d/dS0, d/dsigma) for paths ``start .. start+n-1``."""
    cdef Mkt m
    m.S0 = S0
    m.K = K
    m.r = r
    m.sigma = sigma
    m.B = 0.0 if B is None else B
    m.h_star = h_star
    cdef double[::1] hf_v = np.ascontiguousarray(hf, dtype=np.float64)
    cdef int nf = hf_v.shape[0]
    cdef bint has_coarse = hc is not None
    cdef double[::1] hc_v = np.ascontiguousarray(hc if has_coarse else [1.0], dtype=np.float64)
    cdef int nc = hc_v.shape[0] if has_coarse else 0
    cdef uint64_t useed = <uint64_t>int(seed)
    cdef uint64_t ustart = <uint64_t>int(start)
    fine_arr = np.zeros((n, 3))
    coarse_arr = np.zeros((n, 3))
    flags_arr = np.zeros(n, dtype=np.uint8)
    cdef double[:, ::1] fine = fine_arr
    cdef double[:, ::1] coarse = coarse_arr
    cdef uint8_t[::1] flags = flags_arr
    cdef bint smooth = method != PATHWISE
    cdef bint need_u = method == PATHWISE and payoff == LOOKBACK
    cdef bint need_z = method == SPLIT or method == VIBRATO
    cdef int dd = d if need_z else 1
    cdef double* dW = <double*>malloc(nf * sizeof(double))
    cdef double* U = <double*>malloc(nf * sizeof(double))
    cdef double* Z = <double*>malloc(dd * sizeof(double))
    cdef double* sqh = <double*>malloc(nf * sizeof(double))
    if dW == NULL or U == NULL or Z == NULL or sqh == NULL:
        free(dW)
        free(U)
        free(Z)
        free(sqh)
        raise MemoryError()
    cdef int i, j, k
    cdef uint64_t path
    cdef St x, out
    cdef bint ok
    cdef double dw_half
    with nogil:
        for j in range(nf):
            sqh[j] = sqrt(hf_v[j])
        for i in range(n):
            path = ustart + <uint64_t>i
            fill_normals(dW, nf, useed, level, path, TAG_PATH)
            for j in range(nf):
                dW[j] = dW[j] * sqh[j]
            if need_u:
                fill_uniforms(U, nf, useed, level, path, TAG_BRIDGE)
            if not smooth:
                out = pathwise_fine(payoff, dW, U, &hf_v[0], nf, &m)
                fine[i, 0] = out.s
                fine[i, 1] = out.d0
                fine[i, 2] = out.ds
                if has_coarse:
                    out = pathwise_coarse(payoff, dW, U, &hf_v[0], &hc_v[0], nc, &m)
                    coarse[i, 0] = out.s
                    coarse[i, 1] = out.d0
                    coarse[i, 2] = out.ds
                continue
            if need_z:
                fill_normals(Z, d, useed, level, path, TAG_SPLIT)
            x = initial(&m)
            for j in range(nf - 1):
                x = milstein(x, dW[j], hf_v[j], &m)
            ok = final_step(method, payoff, x, 1.0 + m.r * hf_v[nf - 1], 0.0, hf_v[nf - 1],
                            Z, d, baseline, &m, &out)
            fine[i, 0] = out.s
            fine[i, 1] = out.d0
            fine[i, 2] = out.ds
            if has_coarse:
                x = initial(&m)
                for k in range(nc - 1):
                    x = milstein(x, dW[2 * k] + dW[2 * k + 1], hc_v[k], &m)
                dw_half = dW[nf - 2]
                ok = final_step(method, payoff, x, 1.0 + m.r * hc_v[nc - 1] + m.sigma * dw_half,
                                dw_half, hf_v[nf - 1], Z, d, baseline, &m, &out) and ok
                coarse[i, 0] = out.s
                coarse[i, 1] = out.d0
                coarse[i, 2] = out.ds
            if not ok:
                for k in range(3):
                    fine[i, k] = 0.0
                    coarse[i, k] = 0.0
                flags[i] = 1
    free(dW)
    free(U)
    free(Z)
    free(sqh)
    return fine_arr, coarse_arr, flags_arr


def first_crossings(double S0, double r, double sigma, double B, hf, seed, int level, start,
                    int n):
    """Index of the first step whose crossing test fires, or -1."""
    cdef double[::1] hf_v = np.ascontiguousarray(hf, dtype=np.float64)
    cdef int nf = hf_v.shape[0]
    cdef uint64_t useed = <uint64_t>int(seed)
    cdef uint64_t ustart = <uint64_t>int(start)
    out_arr = np.full(n, -1, dtype=np.int64)
    cdef int64_t[::1] out = out_arr
    cdef double* dW = <double*>malloc(nf * sizeof(double))
    cdef double* U = <double*>malloc(nf * sizeof(double))
    if dW == NULL or U == NULL:
        free(dW)
        free(U)
        raise MemoryError()
    cdef int i, j
    cdef double s, s1, h, x, y, b, p
    with nogil:
        for i in range(n):
            fill_normals(dW, nf, useed, level, ustart + <uint64_t>i, TAG_PATH)
            fill_uniforms(U, nf, useed, level, ustart + <uint64_t>i, TAG_BRIDGE)
            s = S0
            for j in range(nf):
                h = hf_v[j]
                dW[j] = dW[j] * sqrt(h)
                s1 = s * (1.0 + r * h + sigma * dW[j] + 0.5 * sigma * sigma * (dW[j] * dW[j] - h))
                x = s - B if s > B else 0.0
                y = s1 - B if s1 > B else 0.0
                b = sigma * s
                if b != 0.0:
                    p = exp(-2.0 * x * y / (b * b * h))
                else:
                    p = 1.0 if (x <= 0.0 or y <= 0.0) else 0.0
                if U[j] < p:
                    out[i] = j
                    break
                s = s1
    free(dW)
    free(U)
    return out_arr
