"""Milstein discretisation of GBM with tangent propagation.

The scalar routines here are the readable reference; the batch kernels in
``_kernels`` / ``_kernels_py`` re-express the same recurrences over many paths.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .rng import SampleKey, StreamTag, brownian_increments, coarsen, uniform_stream

__all__ = [
    "MarketParams",
    "TangentState",
    "TimeGrid",
    "CoupledPath",
    "milstein_step",
    "uniform_grid",
    "power_grid",
    "level_grids",
    "gamma_for_barrier",
    "simulate_coupled",
]


@dataclass(frozen=True)
class MarketParams:
    S0: float = 100.0
    K: float = 100.0
    r: float = 0.05
    sigma: float = 0.2
    T: float = 1.0
    B: Optional[float] = None

    def __post_init__(self):
        for name in ("S0", "K", "sigma", "T"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be strictly positive, got {getattr(self, name)}")
        if self.B is not None and not 0.0 < self.B < self.S0:
            raise ValueError(f"barrier must satisfy 0 < B < S0, got B={self.B}")

    @property
    def discount(self) -> float:
        return math.exp(-self.r * self.T)


@dataclass(frozen=True)
class TangentState:
    """Asset value with its pathwise derivatives in S0 and sigma."""

    s: float
    ds_dS0: float = 1.0
    ds_dsigma: float = 0.0

    @classmethod
    def initial(cls, S0: float) -> "TangentState":
        return cls(S0, 1.0, 0.0)


@dataclass(frozen=True)
class TimeGrid:
    boundaries: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=float)
        if b.ndim != 1 or b.size < 2 or b[0] != 0.0 or np.any(np.diff(b) <= 0.0):
            raise ValueError("grid boundaries must start at 0 and increase strictly")
        b.setflags(write=False)
        object.__setattr__(self, "boundaries", b)

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.boundaries)

    @property
    def n_steps(self) -> int:
        return self.boundaries.size - 1

    @property
    def T(self) -> float:
        return float(self.boundaries[-1])

    def refines(self, coarse: "TimeGrid") -> bool:
        """True when every coarse step is the union of exactly two fine steps."""
        if self.n_steps != 2 * coarse.n_steps:
            return False
        return bool(np.allclose(self.boundaries[0::2], coarse.boundaries, rtol=1e-14, atol=0.0))


@dataclass(frozen=True)
class CoupledPath:
    level: int
    fine_states: list
    coarse_states: Optional[list]
    fine_increments: np.ndarray
    penultimate_fine_increment: Optional[float]
    fine_grid: TimeGrid
    coarse_grid: Optional[TimeGrid] = None
    bridge_uniforms: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def coarse_increments(self) -> Optional[np.ndarray]:
        if self.coarse_grid is None:
            return None
        return coarsen(self.fine_increments)


def milstein_step(state: TangentState, dW: float, h: float, params: MarketParams) -> TangentState:
    """Advance ``state`` one Milstein step of width ``h`` driven by ``dW``."""
    if not h > 0.0:
        raise ValueError(f"step width must be positive, got {h}")
    r, sig = params.r, params.sigma
    D = 1.0 + r * h + sig * dW + 0.5 * sig * sig * (dW * dW - h)
    return TangentState(
        state.s * D,
        state.ds_dS0 * D,
        state.ds_dsigma * D + state.s * (dW + sig * (dW * dW - h)),
    )


def uniform_grid(level: int, T: float = 1.0) -> TimeGrid:
    if level < 0:
        raise ValueError("level must be non-negative")
    n = 1 << level
    return TimeGrid(T * np.arange(n + 1) / n)


def power_grid(n_steps: int, gamma: float, T: float = 1.0) -> TimeGrid:
    """Grid with boundaries ``((k/n) * T**(1/gamma))**gamma``, dense near t = 0."""
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    if gamma < 1.0:
        raise ValueError(f"gamma must be >= 1 (gamma < 1 coarsens near t=0), got {gamma}")
    if gamma == 1.0:
        return TimeGrid(T * np.arange(n_steps + 1) / n_steps)
    u = np.arange(n_steps + 1) / n_steps * T ** (1.0 / gamma)
    b = u**gamma
    b[-1] = T
    return TimeGrid(b)


def level_grids(level: int, T: float = 1.0, gamma: Optional[float] = None):
    """Fine grid at ``level`` and its 2:1 coarse parent (None at level 0)."""

    def make(lv):
        return uniform_grid(lv, T) if gamma is None else power_grid(1 << lv, gamma, T)

    return make(level), (make(level - 1) if level > 0 else None)


def gamma_for_barrier(S0: float, B: float, sigma: float) -> float:
    """Power-grid exponent putting half the steps inside the crossing window.

    Solves ``0.5**gamma == (log(S0/B)/sigma)**2``.
    """
    if not 0.0 < B < S0:
        raise ValueError(f"need 0 < B < S0, got B={B}, S0={S0}")
    if not sigma > 0.0:
        raise ValueError("sigma must be positive")
    gamma = 2.0 / math.log(2.0) * (math.log(sigma) - math.log(math.log(S0 / B)))
    if gamma < 1.0:
        warnings.warn(
            f"gamma={gamma:.3f} < 1: the crossing window exceeds half the horizon, "
            "a uniform grid is already adequate",
            stacklevel=2,
        )
    return gamma


def _step_all(state, increments, widths, params):
    states = [state]
    for dW, h in zip(increments, widths):
        state = milstein_step(state, float(dW), float(h), params)
        states.append(state)
    return states


def simulate_coupled(
    params: MarketParams,
    grid_pair,
    key: SampleKey,
    stop_at_penultimate: bool = False,
) -> CoupledPath:
    """Simulate the fine path and its coarse partner from one key.

    Fine increments come from the ``PATH`` stream of ``key``; the coarse path is
    driven by their pairwise sums.  Bridge uniforms (one per fine step) are
    taken from the ``BRIDGE`` stream of the same (seed, level, path_index).
    With ``stop_at_penultimate`` both paths stop one step short of maturity.
    """
    fine, coarse = grid_pair
    if coarse is not None and not fine.refines(coarse):
        raise ValueError("fine grid does not refine the coarse grid 2:1")
    path_key = SampleKey(key.seed, key.level, key.path_index, StreamTag.PATH)
    bridge_key = SampleKey(key.seed, key.level, key.path_index, StreamTag.BRIDGE)
    hf = fine.widths
    dW = brownian_increments(path_key, fine.n_steps, hf)
    u = uniform_stream(bridge_key, fine.n_steps)

    nf = fine.n_steps - 1 if stop_at_penultimate else fine.n_steps
    fine_states = _step_all(TangentState.initial(params.S0), dW[:nf], hf[:nf], params)

    coarse_states = None
    penultimate = None
    if coarse is not None:
        dWc = coarsen(dW)
        hc = coarse.widths
        nc = coarse.n_steps - 1 if stop_at_penultimate else coarse.n_steps
        coarse_states = _step_all(TangentState.initial(params.S0), dWc[:nc], hc[:nc], params)
    if fine.n_steps >= 2:
        penultimate = float(dW[-2])

    return CoupledPath(
        level=key.level,
        fine_states=fine_states,
        coarse_states=coarse_states,
        fine_increments=dW,
        penultimate_fine_increment=penultimate,
        fine_grid=fine,
        coarse_grid=coarse,
        bridge_uniforms=u,
    )
