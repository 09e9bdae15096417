import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from mlmc_greeks.payoff import (
    BridgeSample,
    CondExpInputs,
    barrier_condexp_fine,
    barrier_smooth_payoff,
    barrier_survival_coarse,
    barrier_survival_fine,
    bridge_min,
    bridge_min_partials,
    call_condexp,
    call_payoff,
    coarse_bridge_min,
    coarse_condexp_inputs,
    coarse_midpoint,
    crossing_prob,
    crossing_prob_partials,
    digital_condexp,
    digital_payoff,
    fine_condexp_inputs,
    smooth_call,
)
from mlmc_greeks.rng import SampleKey
from mlmc_greeks.sde import MarketParams, TangentState, level_grids, simulate_coupled


@pytest.mark.parametrize("s,value,weight", [(100.0, 0.0, 0.0), (110.0, 10.0, 1.0), (90.0, 0.0, 0.0)])
def test_call_payoff(s, value, weight):
    assert call_payoff(s, 100.0) == (value, weight)


def test_digital_payoff_strict():
    assert digital_payoff(100.0, 100.0) == 0.0
    assert digital_payoff(100.0 + 1e-9, 100.0) == 1.0
    assert digital_payoff(0.0, 100.0) == 0.0


def test_call_condexp_at_the_money():
    v, da, _ = call_condexp(CondExpInputs(100.0, 1.0), 100.0)
    assert v == pytest.approx(1 / math.sqrt(2 * math.pi), rel=1e-15)
    assert da == 0.5


def test_call_condexp_collapses():
    assert call_condexp(CondExpInputs(110.0, 1e-12), 100.0)[0] == pytest.approx(10.0, abs=1e-12)
    assert call_condexp(CondExpInputs(110.0, 0.0), 100.0)[0] == 10.0


def test_call_condexp_quadrature():
    a, b, K = 105.0, 3.0, 100.0
    ref, _ = integrate.quad(lambda x: (x - K) * stats.norm.pdf(x, a, b), K, a + 40 * b, epsabs=1e-12)
    assert call_condexp(CondExpInputs(a, b), K)[0] == pytest.approx(ref, abs=1e-8)


def test_digital_condexp_values():
    assert digital_condexp(CondExpInputs(100.0, 2.0), 100.0)[0] == 0.5
    assert digital_condexp(CondExpInputs(102.0, 2.0), 100.0)[0] == pytest.approx(0.8413447460685429, abs=1e-15)
    assert digital_condexp(CondExpInputs(99.0, 0.0), 100.0)[0] == 0.0


@settings(max_examples=200, deadline=None)
@given(st.floats(60, 140), st.floats(0.05, 20))
def test_condexp_bounds(alpha, beta):
    v = digital_condexp(CondExpInputs(alpha, beta), 100.0)[0]
    assert 0.0 <= v <= 1.0
    c = call_condexp(CondExpInputs(alpha, beta), 100.0)[0]
    assert c >= max(alpha - 100.0, 0.0) - 1e-12


@pytest.mark.parametrize("f", [call_condexp, digital_condexp])
@pytest.mark.parametrize("alpha,beta", [(95.0, 2.0), (100.0, 1.0), (104.0, 6.0), (130.0, 10.0)])
def test_condexp_derivatives_match_differences(f, alpha, beta):
    _, da, db = f(CondExpInputs(alpha, beta), 100.0)
    ea, eb = 1e-6 * alpha, 1e-6 * beta
    fa = (f(CondExpInputs(alpha + ea, beta), 100.0)[0] - f(CondExpInputs(alpha - ea, beta), 100.0)[0]) / (2 * ea)
    fb = (f(CondExpInputs(alpha, beta + eb), 100.0)[0] - f(CondExpInputs(alpha, beta - eb), 100.0)[0]) / (2 * eb)
    assert fa == pytest.approx(da, rel=1e-5, abs=1e-12)
    assert fb == pytest.approx(db, rel=1e-5, abs=1e-12)


def test_condexp_input_formulas():
    p = MarketParams()
    st_ = TangentState(98.0, 0.98, 3.0)
    fine = fine_condexp_inputs(st_, 1 / 64, p)
    assert fine.alpha == pytest.approx((1 + 0.05 / 64) * 98.0)
    assert fine.beta == pytest.approx(0.2 * 0.125 * 98.0)
    crs = coarse_condexp_inputs(st_, 0.01, 1 / 32, 1 / 64, p)
    assert crs.alpha == pytest.approx((1 + 0.05 / 32 + 0.2 * 0.01) * 98.0)
    # the remaining randomness covers half the coarse step
    assert crs.beta == pytest.approx(0.2 * math.sqrt(1 / 64) * 98.0)


def test_bridge_min_examples():
    assert bridge_min(BridgeSample(100.0, 104.0, 20.0, 0.25, 1.0)) == 100.0
    got = bridge_min(BridgeSample(100.0, 100.0, 20.0, 0.25, math.exp(-1)))
    assert got == pytest.approx(100.0 - 0.5 * math.sqrt(2 * 400 * 0.25), rel=1e-14)


def test_bridge_min_below_endpoints():
    rng = np.random.default_rng(0)
    left, right = rng.uniform(50, 150, (2, 100_000))
    b, h, u = rng.uniform(1, 40, 100_000), rng.uniform(1e-3, 1, 100_000), rng.uniform(0, 1, 100_000)
    m = bridge_min_partials(left, right, b, h, u)[0]
    assert np.all(m <= np.minimum(left, right) + 1e-12)


def test_bridge_min_matches_brownian_minimum_law():
    # P(min < x) for a bridge from a to c over time h with vol b
    a, c, b, h = 100.0, 102.0, 20.0, 0.25
    u = np.random.default_rng(3).uniform(size=200_000)
    m = bridge_min_partials(a, c, b, h, u)[0]
    x = 95.0
    exact = math.exp(-2 * (a - x) * (c - x) / (b * b * h))
    assert np.mean(m < x) == pytest.approx(exact, abs=4 * math.sqrt(exact * (1 - exact) / u.size))


@pytest.mark.parametrize("args", [(100.0, 103.0, 20.0, 0.1, 0.3), (100.0, 97.0, 5.0, 0.01, 0.9)])
def test_bridge_min_partials_match_differences(args):
    m, dl, dr, db = bridge_min_partials(*args)
    for idx, d in ((0, dl), (1, dr), (2, db)):
        e = 1e-6 * args[idx]
        up, dn = list(args), list(args)
        up[idx] += e
        dn[idx] -= e
        fd = (bridge_min_partials(*up)[0] - bridge_min_partials(*dn)[0]) / (2 * e)
        assert fd == pytest.approx(d, rel=1e-6, abs=1e-9)


def test_coarse_midpoint_examples():
    assert coarse_midpoint(100.0, 104.0, 20.0, 0.0) == 102.0
    assert coarse_midpoint(100.0, 104.0, 20.0, 0.1) == pytest.approx(101.0, abs=1e-13)


def test_coarse_midpoint_unbiased_deviation():
    z = np.random.default_rng(4).standard_normal((2, 100_000)) * math.sqrt(0.125)
    dev = coarse_midpoint(100.0, 104.0, 20.0, z[1] - z[0]) - 102.0
    assert abs(dev.mean()) <= 3 * dev.std() / math.sqrt(dev.size)


def test_coarse_bridge_min_cases():
    assert coarse_bridge_min(100.0, 98.0, 101.0, 20.0, 0.5, 1.0, 1.0) == 98.0
    u = 0.4
    one = 100.0 - 0.5 * math.sqrt(2 * 400 * 0.25 * -math.log(u))
    assert coarse_bridge_min(100.0, 100.0, 100.0, 20.0, 0.5, u, u) == pytest.approx(one, rel=1e-14)


def test_crossing_prob_examples():
    assert crossing_prob(94.0, 110.0, 95.0, 20.0, 0.25) == 1.0
    assert crossing_prob(400.0, 400.0, 95.0, 20.0, 0.25) < 1e-100
    assert crossing_prob(100.0, 100.0, 95.0, 20.0, 0.25) == pytest.approx(math.exp(-0.5), rel=1e-15)


@pytest.mark.parametrize("args", [(100.0, 98.0, 95.0, 20.0, 0.05), (96.0, 99.0, 95.0, 15.0, 0.01)])
def test_crossing_prob_partials_match_differences(args):
    p, dl, dr, db = crossing_prob_partials(*args)
    for idx, d in ((0, dl), (1, dr), (3, db)):
        e = 1e-6 * args[idx]
        up, dn = list(args), list(args)
        up[idx] += e
        dn[idx] -= e
        fd = (crossing_prob(*up) - crossing_prob(*dn)) / (2 * e)
        assert fd == pytest.approx(d, rel=1e-5)


def test_smooth_call_limits_and_derivatives():
    assert smooth_call(110.0, 100.0, 0.2, 1e-14)[0] == pytest.approx(10.0, abs=1e-10)
    v = smooth_call(100.0, 100.0, 0.2, 1 / 64)[0]
    assert v == pytest.approx(0.2 * 0.125 * 100.0 / math.sqrt(2 * math.pi), rel=1e-14)
    s, sig, hs = 101.0, 0.2, 1 / 64
    _, ds, dsig = smooth_call(s, 100.0, sig, hs)
    e = 1e-6
    assert (smooth_call(s + e, 100.0, sig, hs)[0] - smooth_call(s - e, 100.0, sig, hs)[0]) / (2 * e) == pytest.approx(
        ds, rel=1e-6
    )
    e = 1e-8
    assert (smooth_call(s, 100.0, sig + e, hs)[0] - smooth_call(s, 100.0, sig - e, hs)[0]) / (2 * e) == pytest.approx(
        dsig, rel=1e-5
    )


def _absorbed_final_step(s_prev, h, p):
    # drifted Brownian motion over the last step, killed at B (image method)
    mu, b = p.r * s_prev, p.sigma * s_prev
    sd = b * math.sqrt(h)
    m1, m2 = s_prev + mu * h, 2 * p.B - s_prev + mu * h
    w = math.exp(-2 * mu * (s_prev - p.B) / (b * b))

    def dens(x):
        return stats.norm.pdf(x, m1, sd) - w * stats.norm.pdf(x, m2, sd)

    lo = max(p.K, p.B)
    val, _ = integrate.quad(lambda x: (x - p.K) * dens(x), lo, m1 + 40 * sd, epsabs=1e-12, limit=200)
    return val


@pytest.mark.parametrize("s_prev,h", [(98.0, 1 / 64), (95.0, 1 / 64), (101.0, 1 / 16), (120.0, 1 / 4)])
def test_barrier_condexp_matches_quadrature(s_prev, h):
    p = MarketParams(B=95.0)
    inp = fine_condexp_inputs(TangentState(s_prev, 1.0, 0.0), h, p)
    assert barrier_condexp_fine(inp, p, s_prev) == pytest.approx(_absorbed_final_step(s_prev, h, p), abs=1e-6)


def test_barrier_condexp_far_barrier_is_call():
    p = MarketParams(B=1e-3)
    inp = fine_condexp_inputs(TangentState(99.0, 1.0, 0.0), 1 / 16, p)
    assert barrier_condexp_fine(inp, p, 99.0) == pytest.approx(call_condexp(inp, p.K)[0], rel=1e-12)


def _path(params, level=3, idx=0):
    return simulate_coupled(params, level_grids(level), SampleKey(21, level, idx))


def test_survival_far_barrier_reduces_to_call():
    p = MarketParams(B=1e-6)
    for i in range(20):
        path = _path(p, idx=i)
        v, d0, ds = barrier_survival_fine(path, p)
        last = path.fine_states[-1]
        assert v == pytest.approx(max(last.s - p.K, 0.0), rel=1e-12, abs=1e-12)
        assert d0 == pytest.approx(last.ds_dS0 if last.s > p.K else 0.0, rel=1e-12, abs=1e-12)
        vc = barrier_survival_coarse(path, p)[0]
        assert vc == pytest.approx(max(path.coarse_states[-1].s - p.K, 0.0), rel=1e-12, abs=1e-12)


def test_survival_zero_after_touching_barrier():
    p = MarketParams(B=99.9, sigma=0.6)
    hits = 0
    for i in range(200):
        path = _path(p, idx=i)
        if min(s.s for s in path.fine_states) <= p.B:
            hits += 1
            assert barrier_survival_fine(path, p)[0] == 0.0
    assert hits > 0


def test_smooth_barrier_tends_to_plain_barrier():
    p = MarketParams(B=90.0)
    for i in range(20):
        path = _path(p, idx=i)
        plain = barrier_survival_fine(path, p)[0]
        smooth = barrier_smooth_payoff(path, p, 1e-14)[0]
        assert smooth == pytest.approx(plain, abs=1e-9)
