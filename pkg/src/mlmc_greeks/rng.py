"""Counter-based random streams.

Every variate is a pure function of ``(seed, level, path_index, stream_tag,
draw_index)``.  The bits come from Philox4x32-10 (Salmon et al., Random123):

* key     = (seed & 0xffffffff, seed >> 32)
* counter = (draw_index >> 1,
             path_index & 0xffffffff,
             (path_index >> 32) | level << 16 | stream_tag << 24,
             0)

One Philox block gives four 32-bit words and therefore two 53-bit uniforms;
even draws use words (0, 1), odd draws words (2, 3).  Uniforms lie strictly
inside (0, 1) and normals are their inverse-CDF images, so a given draw index
always maps to the same variate no matter how many are requested.

The compiled kernels implement the same layout bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from scipy.special import ndtri

__all__ = [
    "StreamTag",
    "SampleKey",
    "philox4x32",
    "uniforms",
    "normals",
    "uniform_stream",
    "normal_stream",
    "brownian_increments",
    "coarsen",
]

MAX_LEVEL = 255
MAX_PATH_INDEX = (1 << 48) - 1

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)


class StreamTag(IntEnum):
    PATH = 0
    SPLIT = 1
    BRIDGE = 2


@dataclass(frozen=True)
class SampleKey:
    """Identifies one independent stream of variates."""

    seed: int
    level: int = 0
    path_index: int = 0
    stream_tag: StreamTag = StreamTag.PATH

    def __post_init__(self):
        if not 0 <= self.seed < 1 << 64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if not 0 <= self.level <= MAX_LEVEL:
            raise ValueError(f"level must be in [0, {MAX_LEVEL}], got {self.level}")
        if not 0 <= self.path_index <= MAX_PATH_INDEX:
            raise ValueError(f"path_index out of range: {self.path_index}")
        object.__setattr__(self, "stream_tag", StreamTag(self.stream_tag))


def philox4x32(ctr, key):
    """Philox4x32-10 on broadcastable arrays of 32-bit words.

    ``ctr`` is a 4-tuple and ``key`` a 2-tuple; words are held in uint64
    arrays so the 32x32 products never overflow.
    """
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) for c in ctr)
    k0, k1 = int(key[0]) & 0xFFFFFFFF, int(key[1]) & 0xFFFFFFFF
    for rnd in range(10):
        if rnd:
            k0 = (k0 + _W0) & 0xFFFFFFFF
            k1 = (k1 + _W1) & 0xFFFFFFFF
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = (
            (p1 >> _SHIFT32) ^ c1 ^ np.uint64(k0),
            p1 & _MASK32,
            (p0 >> _SHIFT32) ^ c3 ^ np.uint64(k1),
            p0 & _MASK32,
        )
    return c0, c1, c2, c3


def _to_unit(hi, lo):
    hi = (hi >> np.uint64(5)).astype(np.float64)
    lo = (lo >> np.uint64(6)).astype(np.float64)
    return (hi * 67108864.0 + lo + 0.5) * (1.0 / 9007199254740992.0)


def _counter_word2(level, path_index, tag):
    path_index = np.asarray(path_index, dtype=np.uint64)
    return (path_index >> _SHIFT32) | np.uint64((level << 16) | (int(tag) << 24))


def uniforms(seed, level, path_index, tag, draw):
    """Uniform variates in (0, 1) for broadcastable ``path_index`` and ``draw``."""
    path_index = np.asarray(path_index, dtype=np.uint64)
    draw = np.asarray(draw, dtype=np.uint64)
    x0, x1, x2, x3 = philox4x32(
        (draw >> np.uint64(1), path_index & _MASK32, _counter_word2(level, path_index, tag), 0),
        (seed & 0xFFFFFFFF, seed >> 32),
    )
    odd = (draw & np.uint64(1)).astype(bool)
    return np.where(odd, _to_unit(x2, x3), _to_unit(x0, x1))


def normals(seed, level, path_index, tag, draw):
    """Standard normal variates, the inverse-CDF image of :func:`uniforms`."""
    return ndtri(uniforms(seed, level, path_index, tag, draw))


def uniform_matrix(seed, level, start, n, tag, count):
    """``(n, count)`` uniforms for paths ``start .. start+n-1``, draws ``0 .. count-1``.

    Each Philox block is evaluated once and split into its two draws.
    """
    paths = np.arange(start, start + n, dtype=np.uint64)[:, None]
    n_blocks = (count + 1) // 2
    blocks = np.arange(n_blocks, dtype=np.uint64)[None, :]
    x0, x1, x2, x3 = philox4x32(
        (blocks, paths & _MASK32, _counter_word2(level, paths, tag), 0),
        (seed & 0xFFFFFFFF, seed >> 32),
    )
    out = np.empty((n, 2 * n_blocks))
    out[:, 0::2] = _to_unit(x0, x1)
    out[:, 1::2] = _to_unit(x2, x3)
    return out[:, :count]


def uniform_stream(key: SampleKey, count: int) -> np.ndarray:
    if count < 0:
        raise ValueError("count must be non-negative")
    if count == 0:
        return np.empty(0)
    return uniform_matrix(key.seed, key.level, key.path_index, 1, key.stream_tag, count)[0]


def normal_stream(key: SampleKey, count: int) -> np.ndarray:
    """``count`` independent N(0, 1) draws, deterministic per key."""
    return ndtri(uniform_stream(key, count))


def brownian_increments(key: SampleKey, n_steps: int, step_widths) -> np.ndarray:
    """Brownian increments over steps of the given widths: ``sqrt(h_i) * Z_i``."""
    widths = np.asarray(step_widths, dtype=float)
    if widths.shape != (n_steps,):
        raise ValueError(f"expected {n_steps} step widths, got shape {widths.shape}")
    if np.any(widths <= 0.0):
        raise ValueError("step widths must be strictly positive")
    return np.sqrt(widths) * normal_stream(key, n_steps)


def coarsen(fine_increments) -> np.ndarray:
    """Pairwise sums of fine increments: the driving increments of the coarse path."""
    fine = np.asarray(fine_increments, dtype=float)
    if fine.ndim != 1 or fine.size % 2:
        raise ValueError(f"need an even number of fine increments, got {fine.size}")
    return fine[0::2] + fine[1::2]
