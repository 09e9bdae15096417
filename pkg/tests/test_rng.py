import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mlmc_greeks.rng import (
    SampleKey,
    StreamTag,
    brownian_increments,
    coarsen,
    normal_stream,
    philox4x32,
    uniform_matrix,
    uniform_stream,
    uniforms,
)

# Known-answer vectors published with the Random123 library (philox4x32_10).
KAT = [
    ((0, 0, 0, 0), (0, 0), (0x6627E8D5, 0xE169C58D, 0xBC57AC4C, 0x9B00DBD8)),
    (
        (0xFFFFFFFF,) * 4,
        (0xFFFFFFFF, 0xFFFFFFFF),
        (0x408F276D, 0x41C83B0E, 0xA20BC7C6, 0x6D5451FD),
    ),
    (
        (0x243F6A88, 0x85A308D3, 0x13198A2E, 0x03707344),
        (0xA4093822, 0x299F31D0),
        (0xD16CFE09, 0x94FDCCEB, 0x5001E420, 0x24126EA1),
    ),
]


@pytest.mark.parametrize("ctr,key,expected", KAT)
def test_philox_known_answers(ctr, key, expected):
    out = tuple(int(w) for w in philox4x32(ctr, key))
    assert out == expected


def test_stream_is_pure_function_of_key():
    key = SampleKey(seed=2024, level=3, path_index=77, stream_tag=StreamTag.PATH)
    a = uniform_stream(key, 16)
    b = uniform_stream(key, 16)
    np.testing.assert_array_equal(a, b)


def test_prefix_stability():
    # asking for more draws never changes the earlier ones
    key = SampleKey(9, 2, 5)
    np.testing.assert_array_equal(uniform_stream(key, 7), uniform_stream(key, 20)[:7])


def test_matrix_matches_scalar_addressing():
    m = uniform_matrix(11, 4, 100, 3, StreamTag.SPLIT, 5)
    for i in range(3):
        for j in range(5):
            assert m[i, j] == uniforms(11, 4, 100 + i, StreamTag.SPLIT, j)


@pytest.mark.parametrize(
    "other",
    [
        SampleKey(1, 0, 0, StreamTag.PATH),
        SampleKey(0, 1, 0, StreamTag.PATH),
        SampleKey(0, 0, 1, StreamTag.PATH),
        SampleKey(0, 0, 0, StreamTag.SPLIT),
        SampleKey(0, 0, 0, StreamTag.BRIDGE),
    ],
)
def test_key_fields_separate_streams(other):
    base = uniform_stream(SampleKey(0, 0, 0, StreamTag.PATH), 8)
    assert not np.any(base == uniform_stream(other, 8))


def test_uniforms_strictly_inside_unit_interval():
    u = uniform_matrix(3, 0, 0, 2000, StreamTag.PATH, 64)
    assert u.min() > 0.0 and u.max() < 1.0


def test_normals_pass_ks():
    z = np.concatenate([normal_stream(SampleKey(5, 0, i), 50) for i in range(400)])
    assert stats.kstest(z, "norm").pvalue > 1e-3


def test_consecutive_draws_uncorrelated():
    u = uniform_matrix(8, 2, 0, 20000, StreamTag.PATH, 2)
    assert abs(np.corrcoef(u[:, 0], u[:, 1])[0, 1]) < 0.03


def test_brownian_increment_scaling():
    h = np.full(4, 0.25)
    dW = np.stack([brownian_increments(SampleKey(1, 2, i), 4, h) for i in range(20000)])
    assert abs(dW.var() - 0.25) < 0.01


def test_brownian_rejects_bad_widths():
    with pytest.raises(ValueError):
        brownian_increments(SampleKey(1), 2, [0.5, 0.0])
    with pytest.raises(ValueError):
        brownian_increments(SampleKey(1), 3, [0.5, 0.5])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=16))
def test_coarsen_preserves_total(half):
    fine = np.array(half + half[::-1])
    assert np.isclose(coarsen(fine).sum(), fine.sum(), atol=1e-12)
    assert coarsen(fine).size == fine.size // 2


def test_coarsen_rejects_odd_length():
    with pytest.raises(ValueError):
        coarsen(np.ones(3))


@pytest.mark.parametrize(
    "kwargs",
    [dict(seed=-1), dict(seed=1 << 64), dict(seed=0, level=256), dict(seed=0, path_index=1 << 48)],
)
def test_key_validation(kwargs):
    with pytest.raises(ValueError):
        SampleKey(**kwargs)
