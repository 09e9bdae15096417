"""Payoffs, their conditional-expectation smoothings, and Brownian-bridge tools.

The primitive formulas accept numpy arrays as well as scalars so the batch
fallback kernel can reuse them.  Functions taking a :class:`CoupledPath` are
single-path compositions that return ``(value, d_dS0, d_dsigma)``.

Payoffs here are undiscounted; the estimators apply ``exp(-rT)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .sde import CoupledPath, MarketParams, TangentState

__all__ = [
    "norm_pdf",
    "norm_cdf",
    "CondExpInputs",
    "BridgeSample",
    "call_payoff",
    "digital_payoff",
    "call_condexp",
    "digital_condexp",
    "fine_condexp_inputs",
    "coarse_condexp_inputs",
    "bridge_min",
    "bridge_min_partials",
    "coarse_midpoint",
    "coarse_bridge_min",
    "crossing_prob",
    "crossing_prob_partials",
    "smooth_call",
    "lookback_fine",
    "lookback_coarse",
    "barrier_survival_fine",
    "barrier_survival_coarse",
    "barrier_smooth_payoff",
    "barrier_condexp_fine",
]

INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def norm_pdf(x):
    return INV_SQRT_2PI * np.exp(-0.5 * np.square(x))


def norm_cdf(x):
    # Cephes ndtr: erfc-based, relative error ~1e-16 over the double range.
    return ndtr(x)


@dataclass(frozen=True)
class CondExpInputs:
    """Mean and standard deviation of the terminal value given the path so far.

    ``dalpha`` and ``dbeta`` hold the tangents ``(d/dS0, d/dsigma)``.
    """

    alpha: float
    beta: float
    dalpha: tuple = (0.0, 0.0)
    dbeta: tuple = (0.0, 0.0)


@dataclass(frozen=True)
class BridgeSample:
    s_left: float
    s_right: float
    b: float
    h: float
    u: float


def call_payoff(s, K):
    """``(max(s-K, 0), 1{s>K})``; the weight at the kink is 0."""
    s = np.asarray(s, dtype=float)
    itm = s > K
    return np.where(itm, s - K, 0.0)[()], itm.astype(float)[()]


def digital_payoff(s, K):
    return (np.asarray(s, dtype=float) > K).astype(float)[()]


def call_condexp(inp: CondExpInputs, K: float):
    """E[(S-K)^+] for S ~ N(alpha, beta^2), with its alpha and beta derivatives."""
    return _call_condexp(inp.alpha, inp.beta, K)


def _call_condexp(alpha, beta, K):
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    ok = beta > 0.0
    safe = np.where(ok, beta, 1.0)
    z = (alpha - K) / safe
    pdf, cdf = norm_pdf(z), norm_cdf(z)
    value = np.where(ok, beta * pdf + (alpha - K) * cdf, np.maximum(alpha - K, 0.0))
    d_alpha = np.where(ok, cdf, (alpha > K).astype(float))
    d_beta = np.where(ok, pdf, 0.0)
    return value[()], d_alpha[()], d_beta[()]


def digital_condexp(inp: CondExpInputs, K: float):
    """P(S > K) for S ~ N(alpha, beta^2), with its alpha and beta derivatives."""
    return _digital_condexp(inp.alpha, inp.beta, K)


def _digital_condexp(alpha, beta, K):
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    ok = beta > 0.0
    safe = np.where(ok, beta, 1.0)
    z = (alpha - K) / safe
    pdf = norm_pdf(z)
    value = np.where(ok, norm_cdf(z), (alpha > K).astype(float))
    d_alpha = np.where(ok, pdf / safe, 0.0)
    d_beta = np.where(ok, -z * pdf / safe, 0.0)
    return value[()], d_alpha[()], d_beta[()]


def fine_condexp_inputs(state: TangentState, h: float, params: MarketParams) -> CondExpInputs:
    """Final Euler step ``S (1 + r h + sigma dW)`` seen from the penultimate state."""
    r, sig = params.r, params.sigma
    sh = math.sqrt(h)
    growth = 1.0 + r * h
    return CondExpInputs(
        alpha=growth * state.s,
        beta=sig * sh * state.s,
        dalpha=(growth * state.ds_dS0, growth * state.ds_dsigma),
        dbeta=(sig * sh * state.ds_dS0, sh * state.s + sig * sh * state.ds_dsigma),
    )


def coarse_condexp_inputs(
    state: TangentState, dW_first_half: float, h_c: float, h_second: float, params: MarketParams
) -> CondExpInputs:
    """Last coarse step with its first fine half-increment already known.

    Only the second half (width ``h_second``) remains random.
    """
    r, sig = params.r, params.sigma
    sh = math.sqrt(h_second)
    growth = 1.0 + r * h_c + sig * dW_first_half
    return CondExpInputs(
        alpha=growth * state.s,
        beta=sig * sh * state.s,
        dalpha=(growth * state.ds_dS0, growth * state.ds_dsigma + dW_first_half * state.s),
        dbeta=(sig * sh * state.ds_dS0, sh * state.s + sig * sh * state.ds_dsigma),
    )


def bridge_min(sample: BridgeSample) -> float:
    """Minimum of a Brownian bridge between the endpoints, by inversion of ``u``."""
    return float(bridge_min_partials(sample.s_left, sample.s_right, sample.b, sample.h, sample.u)[0])


def bridge_min_partials(s_left, s_right, b, h, u):
    """Bridge minimum and its derivatives in ``s_left``, ``s_right`` and ``b``."""
    diff = s_right - s_left
    log_u = np.log(u)
    root = np.sqrt(diff * diff - 2.0 * b * b * h * log_u)
    m = 0.5 * (s_left + s_right - root)
    ratio = np.divide(diff, root, out=np.zeros_like(np.asarray(root, dtype=float)), where=root > 0)
    dm_dleft = 0.5 * (1.0 + ratio)
    dm_dright = 0.5 * (1.0 - ratio)
    dm_db = np.divide(b * h * log_u, root, out=np.zeros_like(np.asarray(root, dtype=float)), where=root > 0)
    return m, dm_dleft, dm_dright, dm_db


def coarse_midpoint(s_left, s_right, b, dW_second_minus_first, *, weight=0.5, dW_total=0.0):
    """Coarse-step midpoint rebuilt from the two fine half-increments.

    ``weight`` is the first half's share of the coarse step (0.5 on uniform
    grids, where ``dW_total`` drops out).  In general the value is the linear
    interpolant plus ``b`` times the Brownian-bridge deviation at the split.
    """
    return (
        s_left
        + weight * (s_right - s_left)
        - 0.5 * b * dW_second_minus_first
        + (0.5 - weight) * b * dW_total
    )


def coarse_bridge_min(s_left, s_mid, s_right, b, h_c, u1, u2, *, h_first=None, h_second=None):
    """Minimum over a coarse step as the lesser of its two half-step bridge minima."""
    h1 = 0.5 * h_c if h_first is None else h_first
    h2 = 0.5 * h_c if h_second is None else h_second
    m1 = bridge_min_partials(s_left, s_mid, b, h1, u1)[0]
    m2 = bridge_min_partials(s_mid, s_right, b, h2, u2)[0]
    return float(min(m1, m2))


def crossing_prob(s_left, s_right, B, b, h):
    """Probability that the Brownian bridge between the endpoints dips to ``B``."""
    return crossing_prob_partials(s_left, s_right, B, b, h)[0]


def crossing_prob_partials(s_left, s_right, B, b, h):
    """Crossing probability and its derivatives in ``s_left``, ``s_right`` and ``b``."""
    x = np.maximum(np.asarray(s_left, dtype=float) - B, 0.0)
    y = np.maximum(np.asarray(s_right, dtype=float) - B, 0.0)
    b = np.asarray(b, dtype=float)
    live = b != 0.0
    denom = np.where(live, b * b * h, 1.0)
    q = 2.0 * x * y / denom
    p = np.where(live, np.exp(-q), (np.minimum(x, y) <= 0.0).astype(float))
    scale = np.where(live, -2.0 * p / denom, 0.0)
    dp_dleft = scale * y * (x > 0.0)
    dp_dright = scale * x * (y > 0.0)
    dp_db = np.where(live, 2.0 * p * q / np.where(live, b, 1.0), 0.0)
    return p[()], dp_dleft[()], dp_dright[()], dp_db[()]


def smooth_call(s, K, sigma, h_star):
    """Call payoff smoothed by a normal of width ``sigma*sqrt(h_star)*s``.

    Returns the value, its derivative in ``s`` and in ``sigma``.
    """
    s = np.asarray(s, dtype=float)
    sh = math.sqrt(h_star)
    beta = sigma * sh * s
    value, d_alpha, d_beta = _call_condexp(s, beta, K)
    return value, d_alpha + d_beta * sigma * sh, d_beta * sh * s


def barrier_condexp_fine(inp: CondExpInputs, params: MarketParams, s_prev: float) -> float:
    """Final-step conditional expectation of the down-and-out call.

    The last Euler step is treated as Brownian motion with drift absorbed at
    ``B``: the image source sits at ``2B - s_prev + r h s_prev`` with weight
    ``exp(2 r (B - s_prev) / (sigma^2 s_prev))``.
    """
    if not inp.beta > 0.0:
        raise ValueError("beta must be positive")
    if params.B is None:
        raise ValueError("barrier level required")
    K, B, r, sig = params.K, params.B, params.r, params.sigma
    alpha, beta = inp.alpha, inp.beta
    # 2B + (-1 + r h) s_prev, with r h s_prev = alpha - s_prev
    alpha_img = alpha + 2.0 * (B - s_prev)
    lower = max(K, B)
    weight = math.exp(2.0 * r * (B - s_prev) / (sig * sig * s_prev))

    def part(a):
        return (a - K) * float(norm_cdf((a - lower) / beta)) + beta * INV_SQRT_2PI * math.exp(
            -((lower - a) ** 2) / (2.0 * beta * beta)
        )

    return part(alpha) - weight * part(alpha_img)


# -- single-path compositions ------------------------------------------------


def _midpoint_state(ls, rs, sigma, dW1, dW2, weight):
    """Coarse midpoint with its tangents (b = sigma * s_left)."""
    diff, tot = dW2 - dW1, dW1 + dW2
    coef = -0.5 * diff + (0.5 - weight) * tot
    s = ls.s + weight * (rs.s - ls.s) + sigma * ls.s * coef
    return TangentState(
        s,
        ls.ds_dS0 + weight * (rs.ds_dS0 - ls.ds_dS0) + sigma * ls.ds_dS0 * coef,
        ls.ds_dsigma + weight * (rs.ds_dsigma - ls.ds_dsigma) + (ls.s + sigma * ls.ds_dsigma) * coef,
    )


def _coarse_halves(path: CoupledPath, params: MarketParams):
    """Per coarse step: (left, mid, right) states, half widths, fine indices."""
    hf = path.fine_grid.widths
    hc = path.coarse_grid.widths
    dW = path.fine_increments
    st = path.coarse_states
    for n in range(len(st) - 1):
        w = hf[2 * n] / hc[n]
        mid = _midpoint_state(st[n], st[n + 1], params.sigma, dW[2 * n], dW[2 * n + 1], w)
        yield st[n], mid, st[n + 1], hf[2 * n], hf[2 * n + 1], 2 * n


def _running_min(pieces, sigma):
    """Smallest bridge minimum over pieces (left, right, anchor, h, u), with tangents.

    The bridge volatility is ``sigma * anchor.s``, anchor being the state at
    the start of the (coarse or fine) step the piece belongs to.
    """
    best = None
    for ls, rs, anchor, h, u in pieces:
        m, dl, dr, db = (float(v) for v in bridge_min_partials(ls.s, rs.s, sigma * anchor.s, h, u))
        if best is None or m < best[0]:
            d0 = dl * ls.ds_dS0 + dr * rs.ds_dS0 + db * sigma * anchor.ds_dS0
            ds = dl * ls.ds_dsigma + dr * rs.ds_dsigma + db * (anchor.s + sigma * anchor.ds_dsigma)
            best = (m, d0, ds)
    return best


def lookback_fine(path: CoupledPath, params: MarketParams):
    """``S_T - min`` on the fine path, minima from per-step bridge sampling."""
    st, hf, u = path.fine_states, path.fine_grid.widths, path.bridge_uniforms
    pieces = [(st[n], st[n + 1], st[n], hf[n], u[n]) for n in range(len(st) - 1)]
    m, dm0, dms = _running_min(pieces, params.sigma)
    last = st[-1]
    return last.s - m, last.ds_dS0 - dm0, last.ds_dsigma - dms


def lookback_coarse(path: CoupledPath, params: MarketParams):
    """Coarse lookback payoff reusing the fine half-step increments and uniforms."""
    u = path.bridge_uniforms
    pieces = []
    for ls, mid, rs, h1, h2, j in _coarse_halves(path, params):
        pieces.append((ls, mid, ls, h1, u[j]))
        pieces.append((mid, rs, ls, h2, u[j + 1]))
    m, dm0, dms = _running_min(pieces, params.sigma)
    last = path.coarse_states[-1]
    return last.s - m, last.ds_dS0 - dm0, last.ds_dsigma - dms


def _survival(pieces, params):
    """Product of (1 - p) over pieces (left, right, anchor, h) and its tangents."""
    sig, B = params.sigma, params.B
    prod, d0, ds = 1.0, 0.0, 0.0
    for ls, rs, anchor, h in pieces:
        p, dl, dr, db = (float(v) for v in crossing_prob_partials(ls.s, rs.s, B, sig * anchor.s, h))
        dp0 = dl * ls.ds_dS0 + dr * rs.ds_dS0 + db * sig * anchor.ds_dS0
        dps = dl * ls.ds_dsigma + dr * rs.ds_dsigma + db * (anchor.s + sig * anchor.ds_dsigma)
        d0 = d0 * (1.0 - p) - prod * dp0
        ds = ds * (1.0 - p) - prod * dps
        prod *= 1.0 - p
    return prod, d0, ds


def _fine_pieces(path):
    st, hf = path.fine_states, path.fine_grid.widths
    return [(st[n], st[n + 1], st[n], hf[n]) for n in range(len(st) - 1)]


def _coarse_pieces(path, params):
    pieces = []
    for ls, mid, rs, h1, h2, _ in _coarse_halves(path, params):
        pieces.append((ls, mid, ls, h1))
        pieces.append((mid, rs, ls, h2))
    return pieces


def _terminal_times_survival(last, pieces, params, terminal):
    value, w0, ws = terminal(last)
    prod, p0, ps = _survival(pieces, params)
    return value * prod, w0 * prod + value * p0, ws * prod + value * ps


def _plain_terminal(params):
    def f(last):
        v, w = call_payoff(last.s, params.K)
        return float(v), float(w) * last.ds_dS0, float(w) * last.ds_dsigma

    return f


def _smooth_terminal(params, h_star):
    def f(last):
        v, d_s, d_sig = (float(x) for x in smooth_call(last.s, params.K, params.sigma, h_star))
        return v, d_s * last.ds_dS0, d_s * last.ds_dsigma + d_sig

    return f


def barrier_survival_fine(path: CoupledPath, params: MarketParams):
    """Down-and-out call on the fine path: call payoff times per-step survival."""
    if params.B is None:
        raise ValueError("barrier level required")
    return _terminal_times_survival(path.fine_states[-1], _fine_pieces(path), params, _plain_terminal(params))


def barrier_survival_coarse(path: CoupledPath, params: MarketParams):
    """Down-and-out call on the coarse path, surviving both half steps of each step."""
    if params.B is None:
        raise ValueError("barrier level required")
    return _terminal_times_survival(
        path.coarse_states[-1], _coarse_pieces(path, params), params, _plain_terminal(params)
    )


def barrier_smooth_payoff(path: CoupledPath, params: MarketParams, h_star: float, coarse: bool = False):
    """Survival product times the smoothed call (kink width ``sigma*sqrt(h_star)*S_T``)."""
    if not h_star > 0.0:
        raise ValueError("h_star must be positive")
    if coarse:
        last, pieces = path.coarse_states[-1], _coarse_pieces(path, params)
    else:
        last, pieces = path.fine_states[-1], _fine_pieces(path)
    return _terminal_times_survival(last, pieces, params, _smooth_terminal(params, h_star))
