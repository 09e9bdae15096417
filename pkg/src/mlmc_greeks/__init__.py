"""Multilevel Monte Carlo estimates of option values, deltas and vegas under GBM."""

from .estimators import (
    GreekTriple,
    LevelSample,
    MethodSpec,
    SplitRule,
    backend,
    sample_batch,
    sample_condexp,
    sample_pathwise,
    sample_split,
    sample_vibrato,
    set_backend,
    split_count,
)
from .mlmc import (
    LevelStats,
    MlmcReport,
    allocate_samples,
    classify_complexity,
    collect_level,
    fit_rate,
    fit_weak_rate,
    run_mlmc,
)
from .oracle import Reference, bs_call, bs_digital, reference_mc
from .rng import SampleKey, StreamTag
from .sde import MarketParams, TimeGrid, level_grids, power_grid, uniform_grid

__version__ = "0.1.0"

__all__ = [
    "GreekTriple",
    "LevelSample",
    "LevelStats",
    "MarketParams",
    "MethodSpec",
    "MlmcReport",
    "Reference",
    "SampleKey",
    "SplitRule",
    "StreamTag",
    "TimeGrid",
    "allocate_samples",
    "backend",
    "bs_call",
    "bs_digital",
    "classify_complexity",
    "collect_level",
    "fit_rate",
    "fit_weak_rate",
    "level_grids",
    "power_grid",
    "reference_mc",
    "run_mlmc",
    "sample_batch",
    "sample_condexp",
    "sample_pathwise",
    "sample_split",
    "sample_vibrato",
    "set_backend",
    "split_count",
    "uniform_grid",
]
