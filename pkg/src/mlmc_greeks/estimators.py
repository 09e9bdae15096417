"""Per-level MLMC correction samplers producing (value, delta, vega) jointly.

A level-``l`` sample is the discounted difference between a fine payoff on
``2**l`` steps and a coarse payoff on ``2**(l-1)`` steps driven by the same
Brownian path; at level 0 it is the fine payoff alone.  All heavy lifting
happens in the batch kernels; the functions here pick the grids, resolve the
method, and discount.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import _kernels_py
from .rng import SampleKey
from .sde import MarketParams, gamma_for_barrier, level_grids

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

__all__ = [
    "GreekTriple",
    "SplitRule",
    "MethodSpec",
    "LevelSample",
    "LevelBatch",
    "backend",
    "set_backend",
    "split_count",
    "sample_cost",
    "sample_batch",
    "sample_pathwise",
    "sample_condexp",
    "sample_split",
    "sample_vibrato",
]

METHODS = ("pathwise", "cond_exp", "split", "vibrato")
PAYOFFS = ("call", "digital", "lookback", "barrier", "barrier_smooth", "unit")

# payoff kinds each method accepts ("unit" is the constant payoff P = 1, a
# diagnostic for the Vibrato score terms)
VALID = {
    "pathwise": ("call", "lookback", "barrier", "barrier_smooth"),
    "cond_exp": ("call", "digital"),
    "split": ("call",),
    "vibrato": ("call", "digital", "unit"),
}


def _pick_backend(name):
    if name == "python":
        return _kernels_py
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return _compiled
    if name in (None, "", "auto"):
        return _compiled if _compiled is not None else _kernels_py
    raise ValueError(f"unknown backend {name!r}")


_kernels = _pick_backend(os.environ.get("MLMC_GREEKS_BACKEND"))


def backend() -> str:
    """Name of the active kernel backend, ``"cython"`` or ``"python"``."""
    return _kernels.BACKEND


def set_backend(name: str) -> str:
    """Switch kernels (``"auto"``, ``"cython"`` or ``"python"``); returns the previous name."""
    global _kernels
    previous = _kernels.BACKEND
    _kernels = _pick_backend(name)
    return previous


class GreekTriple(NamedTuple):
    value: float
    delta: float
    vega: float


@dataclass(frozen=True)
class SplitRule:
    """Number of final-step splittings: fixed ``d`` or ``ceil(c * 2**(l/2))``."""

    d: Optional[int] = 10
    c: Optional[float] = None

    def __post_init__(self):
        if (self.d is None) == (self.c is None):
            raise ValueError("give exactly one of a fixed d or an adaptive constant c")
        if self.d is not None and self.d < 1:
            raise ValueError("d must be at least 1")
        if self.c is not None and not self.c > 0:
            raise ValueError("c must be positive")

    @classmethod
    def adaptive(cls, c: float = 1.0) -> "SplitRule":
        return cls(d=None, c=c)


def split_count(level: int, rule: SplitRule) -> int:
    if level < 0:
        raise ValueError("level must be non-negative")
    if rule.d is not None:
        return rule.d
    return max(1, math.ceil(rule.c * 2.0 ** (level / 2.0)))


@dataclass(frozen=True)
class MethodSpec:
    """Estimator configuration.

    ``score_baseline`` (Vibrato only) subtracts ``P(mu)`` inside the score
    averages.  The score has mean zero so this is unbiased; without it the
    delta and vega corrections do not decay with the level.
    """

    method: str = "pathwise"
    payoff_kind: str = "call"
    split_rule: SplitRule = SplitRule()
    h_star: Optional[float] = None
    grid: str = "uniform"
    gamma: Optional[float] = None
    score_baseline: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.payoff_kind not in PAYOFFS:
            raise ValueError(f"unknown payoff {self.payoff_kind!r}")
        if self.payoff_kind not in VALID[self.method]:
            if self.method == "pathwise" and self.payoff_kind == "digital":
                raise ValueError("pathwise sensitivities need a Lipschitz payoff; digital is rejected")
            raise ValueError(f"{self.method} does not support the {self.payoff_kind} payoff")
        if self.payoff_kind == "barrier_smooth" and not (self.h_star and self.h_star > 0):
            raise ValueError("barrier_smooth needs a positive h_star")
        if self.grid not in ("uniform", "power"):
            raise ValueError(f"grid must be 'uniform' or 'power', got {self.grid!r}")
        if self.gamma is not None and self.gamma < 1.0:
            raise ValueError("gamma must be >= 1")

    @property
    def uses_barrier(self) -> bool:
        return self.payoff_kind in ("barrier", "barrier_smooth")

    def d_at(self, level: int) -> int:
        return split_count(level, self.split_rule) if self.method in ("split", "vibrato") else 0

    def resolved_gamma(self, params: MarketParams) -> Optional[float]:
        if self.grid == "uniform":
            return None
        if self.gamma is not None:
            return self.gamma
        if params.B is None:
            raise ValueError("power grid without gamma needs a barrier to derive it")
        return max(1.0, gamma_for_barrier(params.S0, params.B, params.sigma))


class LevelSample(NamedTuple):
    y: GreekTriple
    cost: float
    fine: GreekTriple
    coarse: Optional[GreekTriple]
    rejected: bool


@dataclass
class LevelBatch:
    """Discounted per-path outputs of a batch, each array of shape ``(n, 3)``."""

    y: np.ndarray
    fine: np.ndarray
    coarse: Optional[np.ndarray]
    rejected: np.ndarray
    cost_per_sample: float


def sample_cost(spec: MethodSpec, level: int) -> float:
    """Fine-equivalent timesteps per sample, splitting work included.

    Stepped fine + coarse steps, plus one unit per final-step evaluation
    (``d`` per path for splitting and Vibrato, one per path otherwise).
    """
    nf = 1 << level
    nc = nf // 2 if level > 0 else 0
    paths = 2 if level > 0 else 1
    if spec.method in ("split", "vibrato"):
        return float((nf - 1) + max(nc - 1, 0) + spec.d_at(level) * paths)
    return float(nf + nc)


def _check(spec, params):
    if spec.uses_barrier and params.B is None:
        raise ValueError(f"{spec.payoff_kind} payoff needs a barrier level B")


def sample_batch(
    spec: MethodSpec,
    params: MarketParams,
    level: int,
    seed: int,
    start: int,
    n: int,
    fine_only: bool = False,
) -> LevelBatch:
    """Samples for path indices ``start .. start+n-1`` at ``level``.

    With ``fine_only`` the coarse path is skipped and ``y`` is the plain
    fine-level payoff (used for single-level reference runs).
    """
    _check(spec, params)
    fine_grid, coarse_grid = level_grids(level, params.T, spec.resolved_gamma(params))
    hc = None if (coarse_grid is None or fine_only) else coarse_grid.widths
    d = spec.d_at(level)
    fine, coarse, flags = _kernels.level_samples(
        METHODS.index(spec.method),
        PAYOFFS.index(spec.payoff_kind),
        params.S0,
        params.K,
        params.r,
        params.sigma,
        params.B,
        spec.h_star or 0.0,
        d,
        fine_grid.widths,
        hc,
        seed,
        level,
        start,
        n,
        spec.score_baseline,
    )
    df = params.discount
    fine *= df
    if hc is None:
        coarse = None
        y = fine.copy()
    else:
        coarse *= df
        y = fine - coarse
    cost = sample_cost(spec, level)
    if fine_only:
        cost = float(1 << level) if spec.method not in ("split", "vibrato") else float((1 << level) - 1 + d)
    return LevelBatch(y, fine, coarse, flags.astype(bool), cost)


def _one(spec, params, level, key, method):
    if spec.method != method:
        raise ValueError(f"expected a {method} spec, got {spec.method}")
    b = sample_batch(spec, params, level, key.seed, key.path_index, 1)
    return LevelSample(
        y=GreekTriple(*map(float, b.y[0])),
        cost=b.cost_per_sample,
        fine=GreekTriple(*map(float, b.fine[0])),
        coarse=None if b.coarse is None else GreekTriple(*map(float, b.coarse[0])),
        rejected=bool(b.rejected[0]),
    )


def sample_pathwise(spec: MethodSpec, params: MarketParams, level: int, key: SampleKey) -> LevelSample:
    """Pathwise-sensitivity sample for call, lookback or (smoothed) barrier."""
    return _one(spec, params, level, key, "pathwise")


def sample_condexp(spec: MethodSpec, params: MarketParams, level: int, key: SampleKey) -> LevelSample:
    """Sample with the last step integrated analytically (call or digital)."""
    return _one(spec, params, level, key, "cond_exp")


def sample_split(spec: MethodSpec, params: MarketParams, level: int, key: SampleKey) -> LevelSample:
    """Sample averaging ``d`` resampled final increments (call)."""
    return _one(spec, params, level, key, "split")


def sample_vibrato(spec: MethodSpec, params: MarketParams, level: int, key: SampleKey) -> LevelSample:
    """Pathwise tangents to the penultimate step, likelihood-ratio score on the last."""
    return _one(spec, params, level, key, "vibrato")
