"""Multilevel driver: level statistics, rate fits, allocation and the full run.

Sampling is deterministic: level ``l`` always uses path indices ``0..N_l-1``
under the run seed, grouped into fixed chunks of ``CHUNK`` indices.  Chunk
statistics are formed with compensated sums and merged in index order, so the
result does not depend on how many workers evaluated the chunks.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from .estimators import GreekTriple, MethodSpec, sample_batch
from .sde import MarketParams

__all__ = [
    "CHUNK",
    "OUTPUTS",
    "LevelStats",
    "LevelAccumulator",
    "MlmcReport",
    "WeakRate",
    "Complexity",
    "collect_level",
    "fit_rate",
    "fit_weak_rate",
    "allocate_samples",
    "classify_complexity",
    "run_mlmc",
]

CHUNK = 8192
OUTPUTS = ("value", "delta", "vega")
REJECT_LIMIT = 0.01


def _output_index(output) -> int:
    if isinstance(output, str):
        try:
            return OUTPUTS.index(output)
        except ValueError:
            raise ValueError(f"output must be one of {OUTPUTS}, got {output!r}") from None
    if output not in (0, 1, 2):
        raise ValueError(f"output index must be 0, 1 or 2, got {output!r}")
    return int(output)


class _Moments:
    """Count, mean and centred second moment for a block of columns."""

    __slots__ = ("n", "mean", "m2")

    def __init__(self, n, mean, m2):
        self.n = n
        self.mean = mean
        self.m2 = m2

    @classmethod
    def empty(cls, width):
        return cls(0, np.zeros(width), np.zeros(width))

    @classmethod
    def of(cls, x):
        n = x.shape[0]
        if n == 0:
            return cls.empty(x.shape[1])
        mean = np.array([math.fsum(col) / n for col in x.T])
        m2 = np.array([math.fsum(col) for col in ((x - mean) ** 2).T])
        return cls(n, mean, m2)

    def merge(self, other):
        # pairwise update of Chan, Golub and LeVeque
        if other.n == 0:
            return self
        if self.n == 0:
            return other
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.n / n)
        m2 = self.m2 + other.m2 + delta * delta * (self.n * other.n / n)
        return _Moments(n, mean, m2)

    def variance(self):
        if self.n < 2:
            return np.full(self.mean.shape, np.nan)
        return self.m2 / (self.n - 1)


@dataclass(frozen=True)
class LevelStats:
    """Summary of ``n_samples`` corrections at one level.

    ``mean`` and ``variance`` refer to the correction Y_l (fine minus coarse,
    or the fine payoff alone at level 0); ``fine_*`` and ``coarse_*`` hold the
    two sides separately.  ``cost`` is the total in fine-equivalent steps.
    """

    level: int
    h: float
    n_samples: int
    mean: GreekTriple
    variance: GreekTriple
    cost: float
    cost_per_sample: float = 0.0
    fine_mean: Optional[GreekTriple] = None
    fine_variance: Optional[GreekTriple] = None
    coarse_mean: Optional[GreekTriple] = None
    coarse_variance: Optional[GreekTriple] = None
    rejected: int = 0
    nonfinite: int = 0

    @property
    def rejection_flag(self) -> bool:
        """True when more than 1% of the samples were rejected."""
        return self.rejected > REJECT_LIMIT * self.n_samples

    @property
    def std_error(self) -> GreekTriple:
        return GreekTriple(*(math.sqrt(v / self.n_samples) for v in self.variance))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in list(d.items()):
            if isinstance(v, tuple):
                d[k] = dict(zip(OUTPUTS, map(float, v)))
        d["rejection_flag"] = self.rejection_flag
        return d


def _triple(a):
    return GreekTriple(*map(float, a))


class LevelAccumulator:
    """Running statistics for one level, extendable to more samples."""

    def __init__(self, spec: MethodSpec, params: MarketParams, level: int, seed: int):
        self.spec = spec
        self.params = params
        self.level = level
        self.seed = seed
        self._mom = _Moments.empty(9)
        self._rejected = 0
        self._nonfinite = 0
        self._cost_per_sample = None
        self.n = 0

    def _chunk(self, lo, hi):
        b = sample_batch(self.spec, self.params, self.level, self.seed, lo, hi - lo)
        coarse = b.coarse if b.coarse is not None else np.zeros_like(b.fine)
        x = np.hstack([b.y, b.fine, coarse])
        ok = np.isfinite(x).all(axis=1)
        return _Moments.of(x[ok]), int(np.count_nonzero(b.rejected)), int(ok.size - ok.sum()), b.cost_per_sample

    def extend(self, n_total: int, workers: int = 1) -> "LevelAccumulator":
        """Draw path indices ``self.n .. n_total-1`` and fold them in."""
        if n_total <= self.n:
            return self
        # chunks are merged in index order, a wave of ``workers`` at a time,
        # so memory stays bounded and the result does not depend on workers
        wave = max(1, workers)
        lo = self.n
        pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
        try:
            while lo < n_total:
                bounds = []
                while lo < n_total and len(bounds) < wave:
                    hi = min(n_total, (lo // CHUNK + 1) * CHUNK)
                    bounds.append((lo, hi))
                    lo = hi
                if pool is not None and len(bounds) > 1:
                    parts = list(pool.map(lambda b: self._chunk(*b), bounds))
                else:
                    parts = [self._chunk(*b) for b in bounds]
                for mom, rej, bad, cps in parts:
                    self._mom = self._mom.merge(mom)
                    self._rejected += rej
                    self._nonfinite += bad
                    self._cost_per_sample = cps
        finally:
            if pool is not None:
                pool.shutdown()
        self.n = n_total
        return self

    def stats(self) -> LevelStats:
        mean, var = self._mom.mean, self._mom.variance()
        has_coarse = self.level > 0
        cps = self._cost_per_sample or 0.0
        return LevelStats(
            level=self.level,
            h=self.params.T / (1 << self.level),
            n_samples=self._mom.n,
            mean=_triple(mean[:3]),
            variance=_triple(var[:3]),
            cost=cps * self.n,
            cost_per_sample=cps,
            fine_mean=_triple(mean[3:6]),
            fine_variance=_triple(var[3:6]),
            coarse_mean=_triple(mean[6:]) if has_coarse else None,
            coarse_variance=_triple(var[6:]) if has_coarse else None,
            rejected=self._rejected,
            nonfinite=self._nonfinite,
        )


def collect_level(
    spec: MethodSpec,
    params: MarketParams,
    level: int,
    n: int,
    seed: int,
    workers: int = 1,
) -> LevelStats:
    """Run ``n`` correction samples at ``level`` with path indices ``0..n-1``."""
    if n < 2:
        raise ValueError("need at least 2 samples for a variance")
    if level < 0:
        raise ValueError("level must be non-negative")
    return LevelAccumulator(spec, params, level, seed).extend(n, workers).stats()


def _select(levels, fit_range):
    levels = sorted(levels, key=lambda s: s.level)
    if fit_range is not None:
        lo, hi = fit_range
        levels = [s for s in levels if lo <= s.level <= hi]
    return levels


def fit_rate(levels: Sequence[LevelStats], output="value", fit_range=None):
    """Least-squares variance decay rate.

    Fits ``log2 V_l = log2 c2 - beta * l`` over the chosen levels and returns
    ``(beta_hat, c2_hat)`` with ``c2_hat`` rescaled so that
    ``V_l ~ c2_hat * h_l**beta_hat``.

    Parameters
    ----------
    levels : sequence of LevelStats
    output : {"value", "delta", "vega"} or 0, 1, 2
    fit_range : (lo, hi), optional
        Inclusive level span; all levels are used when omitted.
    """
    k = _output_index(output)
    sel = _select(levels, fit_range)
    if len(sel) < 3:
        raise ValueError("rate fit needs at least 3 levels")
    v = np.array([s.variance[k] for s in sel], dtype=float)
    if not np.all(v > 0.0):
        raise ValueError("rate fit needs strictly positive variances")
    lv = np.array([s.level for s in sel], dtype=float)
    slope, icpt = np.polyfit(lv, np.log2(v), 1)
    beta = -slope
    # h_l = T 2^-l, so V = 2^icpt 2^(-beta l) = 2^icpt T^-beta h^beta
    T = sel[0].h * (1 << sel[0].level)
    return float(beta), float(2.0**icpt * T ** (-beta))


class WeakRate(NamedTuple):
    alpha: float
    reliable: bool


def fit_weak_rate(levels: Sequence[LevelStats], output="value", fit_range=None) -> WeakRate:
    """Decay rate of ``|E Y_l|``.

    The fit is unreliable when at least half of the fitted means are within 3
    standard errors of zero; the slope is still returned in that case.
    """
    k = _output_index(output)
    sel = _select(levels, fit_range)
    if len(sel) < 3:
        raise ValueError("weak-rate fit needs at least 3 levels")
    m = np.array([abs(s.mean[k]) for s in sel], dtype=float)
    se = np.array([math.sqrt(s.variance[k] / s.n_samples) if s.n_samples > 1 else 0.0 for s in sel])
    noisy = int(np.count_nonzero(m <= 3.0 * se))
    if not np.all(m > 0.0):
        return WeakRate(float("nan"), False)
    lv = np.array([s.level for s in sel], dtype=float)
    slope = np.polyfit(lv, np.log2(m), 1)[0]
    return WeakRate(float(-slope), 2 * noisy < len(sel))


def allocate_samples(level_variances, level_costs_per_sample, epsilon: float, n_min: int = 2) -> List[int]:
    """Cost-optimal sample counts for a variance budget of ``epsilon**2 / 2``.

    ``N_l = ceil(2 / eps^2 * sqrt(V_l / c_l) * sum_m sqrt(V_m c_m))``, floored
    at ``n_min``.
    """
    v = np.asarray(level_variances, dtype=float)
    c = np.asarray(level_costs_per_sample, dtype=float)
    if not epsilon > 0.0:
        raise ValueError("epsilon must be positive")
    if v.shape != c.shape or v.ndim != 1:
        raise ValueError("variances and costs must be 1-d sequences of equal length")
    if np.any(v < 0.0) or np.any(~np.isfinite(v)):
        raise ValueError("variances must be finite and non-negative")
    if np.any(c <= 0.0):
        raise ValueError("costs must be positive")
    total = float(np.sum(np.sqrt(v * c)))
    n = np.ceil(2.0 / epsilon**2 * np.sqrt(v / c) * total)
    return [max(n_min, int(x)) for x in n]


class Complexity(NamedTuple):
    """Cost class and the epsilon exponent (``-2`` for both log-free and log^2 classes)."""

    cls: str
    exponent: float


BETA_BAND = (0.9, 1.1)


def classify_complexity(beta_hat: float, alpha_hat: float) -> Complexity:
    """Cost growth in epsilon implied by the variance and weak rates."""
    if not alpha_hat >= 0.5:
        raise ValueError(f"classification needs alpha >= 0.5, got {alpha_hat}")
    if beta_hat > BETA_BAND[1]:
        return Complexity("eps2", -2.0)
    if beta_hat >= BETA_BAND[0]:
        return Complexity("eps2log2", -2.0)
    return Complexity("eps2plus", -2.0 - (1.0 - beta_hat) / alpha_hat)


@dataclass
class MlmcReport:
    estimates: GreekTriple
    std_errors: GreekTriple
    levels: List[LevelStats]
    beta_hat: GreekTriple
    alpha_hat: GreekTriple
    complexity_class: tuple
    total_cost: float
    epsilon: float
    converged: bool = True
    notes: List[str] = field(default_factory=list)

    @property
    def nonfinite(self) -> int:
        return sum(s.nonfinite for s in self.levels)

    def to_dict(self) -> dict:
        def named(t):
            return {k: (None if v is None else float(v)) for k, v in zip(OUTPUTS, t)}

        return {
            "estimates": named(self.estimates),
            "std_errors": named(self.std_errors),
            "beta_hat": named(self.beta_hat),
            "alpha_hat": named(self.alpha_hat),
            "complexity_class": dict(
                zip(OUTPUTS, [None if c is None else {"class": c.cls, "exponent": c.exponent} for c in self.complexity_class])
            ),
            "total_cost": self.total_cost,
            "epsilon": self.epsilon,
            "converged": self.converged,
            "nonfinite": self.nonfinite,
            "notes": list(self.notes),
            "levels": [s.to_dict() for s in self.levels],
        }


def _rates(stats):
    corr = [s for s in stats if s.level >= 1]
    betas, alphas = [], []
    for k in range(3):
        try:
            betas.append(fit_rate(corr, k)[0])
        except ValueError:
            betas.append(float("nan"))
        try:
            alphas.append(fit_weak_rate(corr, k).alpha)
        except ValueError:
            alphas.append(float("nan"))
    return betas, alphas


def run_mlmc(
    spec: MethodSpec,
    params: MarketParams,
    epsilon: float,
    seed: int,
    *,
    max_level: int = 12,
    pilot: int = 10_000,
    n_min: int = 2,
    workers: int = 1,
    default_alpha: float = 1.0,
) -> MlmcReport:
    """Adaptive MLMC estimate of (value, delta, vega) to RMS accuracy ``epsilon``.

    Starts from ``pilot`` samples on levels 0..2, allocates samples for each
    output and keeps the largest count per level, and adds levels until the
    extrapolated bias ``|mean(Y_L)| / (2**alpha - 1)`` of every output is at
    most ``epsilon / sqrt(2)``.  ``alpha`` is fitted on levels 1..L once three
    such levels exist and floored at 0.5; before that ``default_alpha`` is used.
    """
    if not epsilon > 0.0:
        raise ValueError("epsilon must be positive")
    if max_level < 2:
        raise ValueError("max_level must be at least 2")
    accs = [LevelAccumulator(spec, params, l, seed).extend(pilot, workers) for l in range(3)]
    notes = []
    converged = False
    while True:
        stats = [a.stats() for a in accs]
        want = [n_min] * len(accs)
        for k in range(3):
            v = [max(s.variance[k], 0.0) if math.isfinite(s.variance[k]) else 0.0 for s in stats]
            c = [s.cost_per_sample for s in stats]
            want = [max(a, b) for a, b in zip(want, allocate_samples(v, c, epsilon, n_min))]
        for acc, n in zip(accs, want):
            acc.extend(n, workers)
        stats = [a.stats() for a in accs]

        L = len(accs) - 1
        _, alphas = _rates(stats)
        ok = True
        for k in range(3):
            a = alphas[k] if (L >= 3 and math.isfinite(alphas[k])) else default_alpha
            a = max(a, 0.5)
            if abs(stats[L].mean[k]) / (2.0**a - 1.0) > epsilon / math.sqrt(2.0):
                ok = False
        if ok:
            converged = True
            break
        if L >= max_level:
            notes.append(f"bias test still failing at the maximum level {max_level}")
            break
        accs.append(LevelAccumulator(spec, params, L + 1, seed).extend(pilot, workers))

    betas, alphas = _rates(stats)
    classes = []
    for b, a in zip(betas, alphas):
        try:
            classes.append(classify_complexity(b, a) if math.isfinite(b) else None)
        except ValueError:
            classes.append(None)
            notes.append(f"complexity not classified (alpha_hat={a:.3g} < 0.5)")
    est = GreekTriple(*(math.fsum(s.mean[k] for s in stats) for k in range(3)))
    se = GreekTriple(*(math.sqrt(math.fsum(s.variance[k] / s.n_samples for s in stats)) for k in range(3)))
    if any(s.rejection_flag for s in stats):
        notes.append("more than 1% of samples rejected on at least one level")
    return MlmcReport(
        estimates=est,
        std_errors=se,
        levels=stats,
        beta_hat=GreekTriple(*betas),
        alpha_hat=GreekTriple(*alphas),
        complexity_class=tuple(classes),
        total_cost=math.fsum(s.cost for s in stats),
        epsilon=epsilon,
        converged=converged,
        notes=notes,
    )
