"""Acceptance criteria 1-16.

Each test records one PASS/FAIL line (printed in the terminal summary) and
asserts the same condition.  Market: S0=100, K=100, r=0.05, sigma=0.2, T=1.
Rate tables use levels 2-8 with 10^6 samples per level and a +-0.3 band on
each fitted beta.  The whole module takes several minutes.
"""

import functools
import json
import math

import numpy as np
import pytest

from mlmc_greeks.cli import main
from mlmc_greeks.estimators import MethodSpec, SplitRule
from mlmc_greeks.mlmc import collect_level, fit_rate, run_mlmc
from mlmc_greeks.oracle import bs_call, bs_digital, reference_mc
from mlmc_greeks.payoff import CondExpInputs, call_condexp, digital_condexp
from mlmc_greeks.rng import SampleKey
from mlmc_greeks.sde import MarketParams, level_grids, simulate_coupled

pytestmark = pytest.mark.acceptance

BASE = MarketParams(S0=100.0, K=100.0, r=0.05, sigma=0.2, T=1.0)
B85 = MarketParams(S0=100.0, K=100.0, r=0.05, sigma=0.2, T=1.0, B=85.0)
LEVELS = (2, 8)
N = 10**6
TOL = 0.3
SEED = 20240601


@functools.lru_cache(maxsize=None)
def table(spec, params, n=N, seed=SEED):
    return tuple(collect_level(spec, params, lvl, n, seed) for lvl in range(LEVELS[0], LEVELS[1] + 1))


def betas(spec, params, n=N):
    stats = table(spec, params, n)
    return tuple(fit_rate(stats, k, LEVELS)[0] for k in range(3))


def check_rates(criterion, number, label, spec, params, target, n=N):
    got = betas(spec, params, n)
    ok = all(abs(g - t) <= TOL for g, t in zip(got, target))
    shown = "/".join(f"{g:.2f}" for g in got)
    want = "/".join(f"{t:.1f}" for t in target)
    criterion(number, ok, f"{label}: beta = {shown}, target {want} +-{TOL}")


def test_01_pathwise_call(criterion):
    check_rates(criterion, 1, "pathwise call", MethodSpec("pathwise"), BASE, (2.0, 0.8, 1.0))


def test_02_condexp_call(criterion):
    check_rates(criterion, 2, "cond_exp call", MethodSpec("cond_exp"), BASE, (2.0, 1.5, 2.0))


def test_03_split_d10_call(criterion):
    spec = MethodSpec("split", split_rule=SplitRule(d=10))
    check_rates(criterion, 3, "split d=10 call", spec, BASE, (2.0, 1.0, 1.6))


def test_03_split_d500_call(criterion):
    spec = MethodSpec("split", split_rule=SplitRule(d=500))
    check_rates(criterion, 3, "split d=500 call (10^5/level)", spec, BASE, (2.0, 1.5, 2.0), n=10**5)


def test_04_vibrato_call(criterion):
    check_rates(criterion, 4, "vibrato d=10 call", MethodSpec("vibrato"), BASE, (2.0, 1.5, 2.0))


def test_05_condexp_digital(criterion):
    check_rates(criterion, 5, "cond_exp digital", MethodSpec("cond_exp", "digital"), BASE, (1.4, 0.5, 0.6))


def test_06_vibrato_digital(criterion):
    check_rates(criterion, 6, "vibrato d=10 digital", MethodSpec("vibrato", "digital"), BASE, (1.3, 0.3, 0.5))


def test_07_pathwise_lookback(criterion):
    check_rates(criterion, 7, "pathwise lookback", MethodSpec("pathwise", "lookback"), BASE, (1.9, 1.9, 1.3))


def test_08_pathwise_barrier(criterion):
    check_rates(criterion, 8, "pathwise barrier B=85", MethodSpec("pathwise", "barrier"), B85, (1.6, 0.6, 0.6))


def test_09_smoothed_barrier(criterion):
    spec = MethodSpec("pathwise", "barrier_smooth", h_star=1 / 64)
    check_rates(criterion, 9, "smoothed barrier h*=1/64 B=85", spec, B85, (1.7, 0.7, 0.7))


@pytest.mark.parametrize(
    "spec,oracle",
    [(MethodSpec("cond_exp"), bs_call), (MethodSpec("vibrato", "digital"), bs_digital)],
    ids=["cond_exp-call", "vibrato-digital"],
)
def test_10_oracle_agreement(spec, oracle, criterion):
    eps = 0.02
    r = run_mlmc(spec, BASE, eps, SEED)
    ref = oracle(BASE)
    dv = abs(r.estimates.value - ref.value)
    zd = abs(r.estimates.delta - ref.delta) / r.std_errors.delta
    zv = abs(r.estimates.vega - ref.vega) / r.std_errors.vega
    ok = r.converged and dv <= 3 * eps and zd <= 3 and zv <= 3
    criterion(
        10,
        ok,
        f"{spec.method} {spec.payoff_kind} eps={eps}: |value err| = {dv:.4f} (<= {3 * eps}), "
        f"delta {zd:.2f} s.e., vega {zv:.2f} s.e., L = {len(r.levels) - 1}",
    )


def test_11_lookback_identity(criterion):
    # single-level reference at the finest table level, plus the full MLMC run
    ref = reference_mc(MethodSpec("pathwise", "lookback"), BASE, 8, N, SEED)
    gap = abs(ref.value - BASE.S0 * ref.delta)
    se = math.hypot(ref.uncertainty.value, BASE.S0 * ref.uncertainty.delta)
    r = run_mlmc(MethodSpec("pathwise", "lookback"), BASE, 0.02, SEED)
    gap2 = abs(r.estimates.value - BASE.S0 * r.estimates.delta)
    se2 = math.hypot(r.std_errors.value, BASE.S0 * r.std_errors.delta)
    # the identity is exact per path, so the gap is far below any s.e.
    ok = gap <= 3 * se and gap2 <= 3 * se2
    criterion(11, ok, f"lookback |V - S0 delta| = {gap:.2e} (3 s.e. {3 * se:.2e}), mlmc {gap2:.2e} (3 s.e. {3 * se2:.2e})")


B95 = MarketParams(S0=100.0, K=100.0, r=0.05, sigma=0.2, T=1.0, B=95.0)
COMBOS = [
    ("pathwise", "call", BASE, {}),
    ("pathwise", "lookback", BASE, {}),
    ("pathwise", "barrier", B85, {}),
    ("pathwise", "barrier_smooth", B85, {"h_star": 1 / 64}),
    ("pathwise", "barrier", B95, {"grid": "power"}),
    ("cond_exp", "call", BASE, {}),
    ("cond_exp", "digital", BASE, {}),
    ("split", "call", BASE, {}),
    ("vibrato", "call", BASE, {}),
    ("vibrato", "digital", BASE, {}),
    ("vibrato", "unit", BASE, {}),
]


@pytest.mark.parametrize(
    "method,payoff,params,kw",
    COMBOS,
    ids=[f"{m}-{p}{'-' + k['grid'] if 'grid' in k else ''}" for m, p, _, k in COMBOS],
)
def test_12_telescoping(method, payoff, params, kw, criterion):
    spec = MethodSpec(method, payoff, **kw)
    worst = 0.0
    stats = [collect_level(spec, params, lvl, N, SEED + 7) for lvl in range(0, 6)]
    for lvl in range(1, 6):
        fine_prev, here = stats[lvl - 1], stats[lvl]
        for k in range(3):
            diff = here.coarse_mean[k] - fine_prev.fine_mean[k]
            se = math.sqrt(here.coarse_variance[k] / here.n_samples + fine_prev.fine_variance[k] / fine_prev.n_samples)
            z = abs(diff) / se if se > 0 else (0.0 if diff == 0 else math.inf)
            worst = max(worst, z)
    label = f"{method}/{payoff}{' power grid' if kw.get('grid') == 'power' else ''}"
    criterion(12, worst <= 3.0, f"telescoping {label}, l=1..5: max |coarse_l - fine_(l-1)| = {worst:.2f} s.e.")


def test_13_tangents_and_condexp_derivatives(criterion):
    rng = np.random.default_rng(SEED)
    worst_tangent = 0.0
    for i in range(100):
        p = MarketParams(S0=rng.uniform(50, 150), sigma=rng.uniform(0.1, 0.5), r=rng.uniform(0.0, 0.1))
        key = SampleKey(SEED, 4, i)
        grids = level_grids(4, p.T)
        st = simulate_coupled(p, grids, key).fine_states[-1]
        for name, tangent in (("S0", st.ds_dS0), ("sigma", st.ds_dsigma)):
            bump = 1e-6 * getattr(p, name)
            up = MarketParams(**{**p.__dict__, name: getattr(p, name) + bump})
            dn = MarketParams(**{**p.__dict__, name: getattr(p, name) - bump})
            fd = (simulate_coupled(up, grids, key).fine_states[-1].s - simulate_coupled(dn, grids, key).fine_states[-1].s) / (
                2 * bump
            )
            worst_tangent = max(worst_tangent, abs(fd - tangent) / max(abs(tangent), 1e-8 * p.S0))
    worst_condexp = 0.0
    for _ in range(100):
        alpha, beta = rng.uniform(80, 120), rng.uniform(0.5, 10.0)
        for f in (call_condexp, digital_condexp):
            f0, da, db = f(CondExpInputs(alpha, beta), 100.0)
            ea, eb = 1e-6 * alpha, 1e-6 * beta
            fa = (f(CondExpInputs(alpha + ea, beta), 100.0)[0] - f(CondExpInputs(alpha - ea, beta), 100.0)[0]) / (2 * ea)
            fb = (f(CondExpInputs(alpha, beta + eb), 100.0)[0] - f(CondExpInputs(alpha, beta - eb), 100.0)[0]) / (2 * eb)
            for exact, approx, bump in ((da, fa, ea), (db, fb, eb)):
                # a central difference cannot resolve derivatives below its
                # rounding noise (about eps*|f|/bump); measure relative error
                # against that floor there
                noise = 4 * np.finfo(float).eps * max(abs(f0), 1.0) / bump
                worst_condexp = max(worst_condexp, abs(approx - exact) / max(abs(exact), noise / 1e-5))
    ok = worst_tangent <= 1e-4 and worst_condexp <= 1e-5
    criterion(13, ok, f"tangent max rel err {worst_tangent:.1e} (<= 1e-4), condexp max rel err {worst_condexp:.1e} (<= 1e-5)")


def test_14_vibrato_zero_score(criterion):
    spec = MethodSpec("vibrato", "unit", score_baseline=False)
    worst = 0.0
    for level in (0, 4):
        ref = reference_mc(spec, BASE, level, N, SEED)
        for k in (1, 2):
            worst = max(worst, abs(ref.triple[k]) / ref.uncertainty[k])
    criterion(14, worst <= 3.0, f"vibrato P=1 without baseline, levels 0 and 4: max |greek| = {worst:.2f} s.e.")


def _cli(*args):
    return main([str(a) for a in args])


def test_15_density(tmp_path, criterion):
    out95, out85 = tmp_path / "d95.csv", tmp_path / "d85.csv"
    common = ("--levels", "8:8", "--samples", N, "--seed", SEED)
    assert _cli("density", "--B", 95, *common, "--out", out95) == 0
    assert _cli("density", "--B", 85, *common, "--out", out85) == 0
    s95 = json.loads((tmp_path / "d95.json").read_text())
    s85 = json.loads((tmp_path / "d85.json").read_text())
    # "diffuse": the B=85 median crossing time is a sizeable fraction of T and
    # far beyond the B=95 peak
    ok = (
        abs(s95["tau"] - 0.0658) < 5e-5
        and s95["fraction_before_2tau"] >= 0.5
        and s85["median_crossing_time"] >= 0.25 * BASE.T
        and s85["median_crossing_time"] >= 3 * s95["median_crossing_time"]
    )
    criterion(
        15,
        ok,
        f"density B=95: tau = {s95['tau']:.4f}, {s95['fraction_before_2tau']:.1%} before 2 tau, "
        f"median {s95['median_crossing_time']:.3f}; B=85: median {s85['median_crossing_time']:.3f}",
    )


def test_15_compare(tmp_path, criterion):
    out = tmp_path / "cmp.json"
    args = ("compare", "--B", 95, "--payoff", "barrier", "--levels", "0:8", "--samples", N, "--seed", SEED)
    assert _cli(*args, "--out", out) == 0
    body = json.loads(out.read_text())
    vega = body["verdict"]["vega"]
    rows = {row["level"]: row for row in body["table"]}
    coarse = body["coarsest_compared_level"]
    # both grids take a single step at level 0, so the coarse-level side of the
    # trade-off is read at the coarsest level where they differ
    ok = vega["power_lower_at_finest_two"] and vega["power_higher_at_coarsest"]
    detail = ", ".join(
        f"l={lv}: {rows[lv]['power']['vega']:.1f} vs {rows[lv]['uniform']['vega']:.1f}" for lv in (coarse, 7, 8)
    )
    criterion(15, ok, f"compare B=95 vega power vs uniform variance ({detail})")


def test_16_determinism_across_workers(tmp_path, criterion):
    spec = MethodSpec("vibrato", "digital")
    a = run_mlmc(spec, BASE, 0.05, SEED, workers=1)
    b = run_mlmc(spec, BASE, 0.05, SEED, workers=4)
    same_est = np.allclose(a.estimates, b.estimates, rtol=1e-12, atol=0) and np.allclose(
        a.std_errors, b.std_errors, rtol=1e-12, atol=0
    )
    files_same = True
    for mode, extra in (
        ("levels", ("--levels", "0:5", "--samples", 100_000)),
        ("mlmc", ("--method", "cond_exp", "--eps", 0.1)),
        ("compare", ("--B", 95, "--payoff", "barrier", "--levels", "0:4", "--samples", 50_000)),
        ("density", ("--B", 95, "--levels", "6:6", "--samples", 50_000)),
    ):
        outs = []
        for w in (1, 4):
            path = tmp_path / f"{mode}-{w}.out"
            _cli(mode, *extra, "--seed", SEED, "--workers", w, "--out", path)
            outs.append(path.read_bytes())
            summary = path.with_suffix(".json")
            if summary.exists():
                outs[-1] += summary.read_bytes()
        files_same = files_same and outs[0] == outs[1]
    criterion(16, same_est and files_same, f"workers 1 vs 4: estimates equal {same_est}, CLI outputs byte-identical {files_same}")

