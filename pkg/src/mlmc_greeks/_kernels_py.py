"""Pure-numpy batch kernels (fallback when the compiled extension is absent).

Vectorised over paths, looping over time steps.  The interface and the
variate layout match ``_kernels.pyx`` exactly.
"""

import math

import numpy as np
from scipy.special import ndtri

from .payoff import _call_condexp, _digital_condexp, bridge_min_partials, crossing_prob_partials
from .rng import StreamTag, uniform_matrix

BACKEND = "python"

PATHWISE, COND_EXP, SPLIT, VIBRATO = 0, 1, 2, 3
CALL, DIGITAL, LOOKBACK, BARRIER, BARRIER_SMOOTH, UNIT = 0, 1, 2, 3, 4, 5

FLAG_DEGENERATE = 1

# bound on paths x steps held in memory per sub-batch
_CELLS = 1 << 18


class _Market:
    def __init__(self, S0, K, r, sigma, B, h_star):
        self.S0, self.K, self.r, self.sigma, self.B, self.h_star = S0, K, r, sigma, B, h_star


def _milstein(s, d0, ds, dw, h, m):
    sig = m.sigma
    D = 1.0 + m.r * h + sig * dw + 0.5 * sig * sig * (dw * dw - h)
    return s * D, d0 * D, ds * D + s * (dw + sig * (dw * dw - h))


def _initial(n, m):
    return np.full(n, m.S0), np.ones(n), np.zeros(n)


def _run(state, dW, widths, m):
    s, d0, ds = state
    for j in range(len(widths)):
        s, d0, ds = _milstein(s, d0, ds, dW[:, j], widths[j], m)
    return s, d0, ds


def _terminal(payoff, s, d0, ds, m):
    if payoff == BARRIER_SMOOTH:
        sh = math.sqrt(m.h_star)
        v, da, db = _call_condexp(s, m.sigma * sh * s, m.K)
        dv_ds = da + db * m.sigma * sh
        return v, dv_ds * d0, dv_ds * ds + db * sh * s
    w = (s > m.K).astype(float)
    return np.where(s > m.K, s - m.K, 0.0), w * d0, w * ds


def _pathwise_fine(payoff, n, dW, U, hf, m):
    sig = m.sigma
    s, d0, ds = _initial(n, m)
    if payoff == LOOKBACK:
        best = bm0 = bms = None
    else:
        prod, p0, ps = np.ones(n), np.zeros(n), np.zeros(n)
    for j in range(len(hf)):
        s1, d01, ds1 = _milstein(s, d0, ds, dW[:, j], hf[j], m)
        if payoff == LOOKBACK:
            mn, dl, dr, db = bridge_min_partials(s, s1, sig * s, hf[j], U[:, j])
            c0 = dl * d0 + dr * d01 + db * sig * d0
            cs = dl * ds + dr * ds1 + db * (s + sig * ds)
            if best is None:
                best, bm0, bms = mn, c0, cs
            else:
                take = mn < best
                best, bm0, bms = np.where(take, mn, best), np.where(take, c0, bm0), np.where(take, cs, bms)
        elif payoff in (BARRIER, BARRIER_SMOOTH):
            prod, p0, ps = _survive(prod, p0, ps, (s, d0, ds), (s1, d01, ds1), (s, d0, ds), hf[j], m)
        s, d0, ds = s1, d01, ds1
    if payoff == LOOKBACK:
        return s - best, d0 - bm0, ds - bms
    v, v0, vs = _terminal(payoff, s, d0, ds, m)
    if payoff == CALL:
        return v, v0, vs
    return v * prod, v0 * prod + v * p0, vs * prod + v * ps


def _survive(prod, p0, ps, left, right, anchor, h, m):
    sig = m.sigma
    p, dl, dr, db = crossing_prob_partials(left[0], right[0], m.B, sig * anchor[0], h)
    dp0 = dl * left[1] + dr * right[1] + db * sig * anchor[1]
    dps = dl * left[2] + dr * right[2] + db * (anchor[0] + sig * anchor[2])
    q = 1.0 - p
    return prod * q, p0 * q - prod * dp0, ps * q - prod * dps


def _pathwise_coarse(payoff, n, dW, U, hf, hc, m):
    sig = m.sigma
    s, d0, ds = _initial(n, m)
    best = bm0 = bms = None
    prod, p0, ps = np.ones(n), np.zeros(n), np.zeros(n)
    for k in range(len(hc)):
        dw1, dw2 = dW[:, 2 * k], dW[:, 2 * k + 1]
        s1, d01, ds1 = _milstein(s, d0, ds, dw1 + dw2, hc[k], m)
        if payoff != CALL:
            w = hf[2 * k] / hc[k]
            coef = -0.5 * (dw2 - dw1) + (0.5 - w) * (dw1 + dw2)
            mid = (
                s + w * (s1 - s) + sig * s * coef,
                d0 + w * (d01 - d0) + sig * d0 * coef,
                ds + w * (ds1 - ds) + (s + sig * ds) * coef,
            )
            left, right, anchor = (s, d0, ds), (s1, d01, ds1), (s, d0, ds)
            halves = ((left, mid, hf[2 * k], 2 * k), (mid, right, hf[2 * k + 1], 2 * k + 1))
            for a, b, h, j in halves:
                if payoff == LOOKBACK:
                    mn, dl, dr, db = bridge_min_partials(a[0], b[0], sig * anchor[0], h, U[:, j])
                    c0 = dl * a[1] + dr * b[1] + db * sig * anchor[1]
                    cs = dl * a[2] + dr * b[2] + db * (anchor[0] + sig * anchor[2])
                    if best is None:
                        best, bm0, bms = mn, c0, cs
                    else:
                        take = mn < best
                        best = np.where(take, mn, best)
                        bm0, bms = np.where(take, c0, bm0), np.where(take, cs, bms)
                else:
                    prod, p0, ps = _survive(prod, p0, ps, a, b, anchor, h, m)
        s, d0, ds = s1, d01, ds1
    if payoff == LOOKBACK:
        return s - best, d0 - bm0, ds - bms
    v, v0, vs = _terminal(payoff, s, d0, ds, m)
    if payoff == CALL:
        return v, v0, vs
    return v * prod, v0 * prod + v * p0, vs * prod + v * ps


def _vibrato_payoff(payoff, ST, K):
    if payoff == CALL:
        return np.where(ST > K, ST - K, 0.0)
    if payoff == DIGITAL:
        return (ST > K).astype(float)
    return np.ones_like(ST)


def _final_step(method, payoff, state, growth, dgrowth_dsig, h_rem, Z, m, baseline=True):
    """Smoothed last step from a state: S_T = growth*s + sigma*sqrt(h_rem)*s*z."""
    s, d0, ds = state
    sh = math.sqrt(h_rem)
    alpha = growth * s
    a0, a_s = growth * d0, growth * ds + dgrowth_dsig * s
    beta = m.sigma * sh * s
    b0, b_s = m.sigma * sh * d0, sh * s + m.sigma * sh * ds
    degenerate = np.zeros(s.shape, dtype=bool)
    if method == COND_EXP:
        f = _call_condexp if payoff == CALL else _digital_condexp
        v, dv_da, dv_db = f(alpha, beta, m.K)
        return (v, dv_da * a0 + dv_db * b0, dv_da * a_s + dv_db * b_s), degenerate
    ST = alpha[:, None] + beta[:, None] * Z
    if method == SPLIT:
        w = ST > m.K
        v = np.where(w, ST - m.K, 0.0).mean(axis=1)
        g0 = (w * (a0[:, None] + b0[:, None] * Z)).mean(axis=1)
        gs = (w * (a_s[:, None] + b_s[:, None] * Z)).mean(axis=1)
        return (v, g0, gs), degenerate
    P = _vibrato_payoff(payoff, ST, m.K)
    # subtracting P(alpha) leaves the score averages unbiased (the score has
    # mean zero) and removes the O(1/sqrt(h)) noise that swamps fine/coarse
    # cancellation
    Pc = P - _vibrato_payoff(payoff, alpha, m.K)[:, None] if baseline else P
    degenerate = ~(beta > 0.0)
    inv = 1.0 / np.where(degenerate, 1.0, beta)
    score_mu = (Pc * Z).mean(axis=1) * inv
    score_sig = (Pc * (Z * Z - 1.0)).mean(axis=1) * inv
    v = P.mean(axis=1)
    out = (v, a0 * score_mu + b0 * score_sig, a_s * score_mu + b_s * score_sig)
    return tuple(np.where(degenerate, 0.0, x) for x in out), degenerate


def _batch(method, payoff, m, hf, hc, seed, level, start, n, d, baseline):
    nf = len(hf)
    dW = ndtri(uniform_matrix(seed, level, start, n, StreamTag.PATH, nf)) * np.sqrt(hf)
    fine = np.zeros((n, 3))
    coarse = np.zeros((n, 3))
    flags = np.zeros(n, dtype=np.uint8)
    if method == PATHWISE:
        U = None
        if payoff in (LOOKBACK,):
            U = uniform_matrix(seed, level, start, n, StreamTag.BRIDGE, nf)
        fine[:] = np.column_stack(_pathwise_fine(payoff, n, dW, U, hf, m))
        if hc is not None:
            coarse[:] = np.column_stack(_pathwise_coarse(payoff, n, dW, U, hf, hc, m))
        return fine, coarse, flags

    Z = None
    if method in (SPLIT, VIBRATO):
        Z = ndtri(uniform_matrix(seed, level, start, n, StreamTag.SPLIT, d))
    state = _run(_initial(n, m), dW[:, : nf - 1], hf[: nf - 1], m)
    out, bad = _final_step(method, payoff, state, 1.0 + m.r * hf[-1], 0.0, hf[-1], Z, m, baseline)
    fine[:] = np.column_stack(out)
    if hc is not None:
        nc = len(hc)
        dWc = dW[:, 0::2] + dW[:, 1::2]
        state = _run(_initial(n, m), dWc[:, : nc - 1], hc[: nc - 1], m)
        dw_half = dW[:, nf - 2]
        outc, badc = _final_step(
            method, payoff, state, 1.0 + m.r * hc[-1] + m.sigma * dw_half, dw_half, hf[-1], Z, m, baseline
        )
        coarse[:] = np.column_stack(outc)
        bad = bad | badc
    if bad.any():
        fine[bad] = 0.0
        coarse[bad] = 0.0
        flags[bad] = FLAG_DEGENERATE
    return fine, coarse, flags


def level_samples(
    method, payoff, S0, K, r, sigma, B, h_star, d, hf, hc, seed, level, start, n, baseline=True
):
    """Fine and coarse (value, d/dS0, d/dsigma) for paths ``start .. start+n-1``.

    ``hc`` is None at level 0.  Returns ``(fine, coarse, flags)`` with
    ``fine``/``coarse`` of shape ``(n, 3)``; outputs are undiscounted.
    ``baseline`` subtracts P(alpha) inside the Vibrato score averages.
    """
    hf = np.ascontiguousarray(hf, dtype=float)
    hc = None if hc is None else np.ascontiguousarray(hc, dtype=float)
    m = _Market(S0, K, r, sigma, B, h_star)
    fine = np.zeros((n, 3))
    coarse = np.zeros((n, 3))
    flags = np.zeros(n, dtype=np.uint8)
    rows = max(1, _CELLS // max(len(hf), d if method in (SPLIT, VIBRATO) else 1))
    for lo in range(0, n, rows):
        hi = min(n, lo + rows)
        f, c, g = _batch(method, payoff, m, hf, hc, seed, level, start + lo, hi - lo, d, baseline)
        fine[lo:hi], coarse[lo:hi], flags[lo:hi] = f, c, g
    return fine, coarse, flags


def first_crossings(S0, r, sigma, B, hf, seed, level, start, n):
    """Index of the first step whose crossing test fires, or -1.

    Step j fires when the BRIDGE-stream uniform j falls below the bridge
    crossing probability of that step.
    """
    hf = np.ascontiguousarray(hf, dtype=float)
    m = _Market(S0, 0.0, r, sigma, B, 0.0)
    out = np.full(n, -1, dtype=np.int64)
    rows = max(1, _CELLS // len(hf))
    for lo in range(0, n, rows):
        k = min(n, lo + rows) - lo
        dW = ndtri(uniform_matrix(seed, level, start + lo, k, StreamTag.PATH, len(hf))) * np.sqrt(hf)
        U = uniform_matrix(seed, level, start + lo, k, StreamTag.BRIDGE, len(hf))
        s = np.full(k, S0)
        first = np.full(k, -1, dtype=np.int64)
        for j in range(len(hf)):
            s1 = s * (1.0 + r * hf[j] + sigma * dW[:, j] + 0.5 * sigma * sigma * (dW[:, j] ** 2 - hf[j]))
            p = crossing_prob_partials(s, s1, B, sigma * s, hf[j])[0]
            hit = (first < 0) & (U[:, j] < p)
            first[hit] = j
            s = s1
        out[lo : lo + k] = first
    return out
