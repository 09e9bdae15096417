"""Reference values: Black-Scholes closed forms, quadrature and long MC runs."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import ndtr

from .estimators import GreekTriple, MethodSpec, sample_batch
from .mlmc import CHUNK, _Moments
from .payoff import norm_pdf
from .sde import MarketParams

__all__ = [
    "Reference",
    "bs_call",
    "bs_digital",
    "quad_call",
    "quad_digital",
    "reference_mc",
]

SOURCES = ("closed_form", "quadrature", "high_resolution_mc")


@dataclass(frozen=True)
class Reference:
    value: float
    delta: float
    vega: float
    source: str = "closed_form"
    uncertainty: GreekTriple = GreekTriple(0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")

    @property
    def triple(self) -> GreekTriple:
        return GreekTriple(self.value, self.delta, self.vega)


def _d1_d2(p: MarketParams):
    sT = p.sigma * math.sqrt(p.T)
    d1 = (math.log(p.S0 / p.K) + (p.r + 0.5 * p.sigma**2) * p.T) / sT
    return d1, d1 - sT


def bs_call(params: MarketParams) -> Reference:
    """Black-Scholes European call price, delta and vega."""
    d1, d2 = _d1_d2(params)
    df = params.discount
    price = params.S0 * ndtr(d1) - params.K * df * ndtr(d2)
    return Reference(
        float(price),
        float(ndtr(d1)),
        float(params.S0 * math.sqrt(params.T) * norm_pdf(d1)),
    )


def bs_digital(params: MarketParams) -> Reference:
    """Cash-or-nothing digital call paying 1 at maturity."""
    d1, d2 = _d1_d2(params)
    df = params.discount
    phi = float(norm_pdf(d2))
    return Reference(
        float(df * ndtr(d2)),
        df * phi / (params.S0 * params.sigma * math.sqrt(params.T)),
        -df * phi * d1 / params.sigma,
    )


def _quad(params, integrand):
    # integrate over z from the exercise point z*; the normal weight is below
    # 1e-40 past z = 14, far under the tolerance for any sigma*sqrt(T) < 3
    p = params
    sT = p.sigma * math.sqrt(p.T)
    drift = (p.r - 0.5 * p.sigma**2) * p.T
    z_star = (math.log(p.K / p.S0) - drift) / sT

    def f(z):
        return integrand(z, p.S0 * math.exp(drift + sT * z)) * math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)

    val, _ = integrate.quad(f, z_star, max(z_star, 0.0) + 14.0, epsabs=1e-11, epsrel=1e-12, limit=200)
    return p.discount * val


def quad_call(params: MarketParams) -> Reference:
    """Call price and pathwise Greeks by numerical integration."""
    p = params
    rt = math.sqrt(p.T)
    return Reference(
        _quad(p, lambda z, s: s - p.K),
        _quad(p, lambda z, s: s / p.S0),
        _quad(p, lambda z, s: s * (rt * z - p.sigma * p.T)),
        source="quadrature",
    )


def quad_digital(params: MarketParams) -> Reference:
    """Digital price and likelihood-ratio Greeks by numerical integration."""
    p = params
    rt = math.sqrt(p.T)
    return Reference(
        _quad(p, lambda z, s: 1.0),
        _quad(p, lambda z, s: z / (p.S0 * p.sigma * rt)),
        _quad(p, lambda z, s: (z * z - 1.0) / p.sigma - rt * z),
        source="quadrature",
    )


def reference_mc(
    spec: MethodSpec,
    params: MarketParams,
    level: int,
    n: int,
    seed: int,
    workers: int = 1,
) -> Reference:
    """Single-level fine estimate with its standard error.

    Used where no closed form is wired (lookback, barrier).  Rejected
    samples count as zero, as in the multilevel runs.
    """
    if n < 2:
        raise ValueError("need at least 2 samples")
    bounds = [(lo, min(n, lo + CHUNK)) for lo in range(0, n, CHUNK)]

    def run(b):
        batch = sample_batch(spec, params, level, seed, b[0], b[1] - b[0], fine_only=True)
        y = batch.y[np.isfinite(batch.y).all(axis=1)]
        return _Moments.of(y)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, bounds))
    else:
        parts = [run(b) for b in bounds]
    mom = _Moments.empty(3)
    for part in parts:
        mom = mom.merge(part)
    se = np.sqrt(mom.variance() / mom.n)
    return Reference(*map(float, mom.mean), source="high_resolution_mc", uncertainty=GreekTriple(*map(float, se)))
