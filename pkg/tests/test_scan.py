import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aussm.errors import ConfigError, ContractError
from aussm.scan import (
    ChunkPlan, angle_prefix, chunked_scan, inclusive_prefix_sum, linear_recurrence,
    reverse_segment_recurrence, segment_recurrence, separable_convolve, track_buffers, tree_scan,
    wrap_angle,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def left_fold(x):
    out, acc = [], 0.0
    for v in x:
        acc += v
        out.append(acc)
    return np.array(out)


# ---------------------------------------------------------------------------
# inclusive_prefix_sum

def test_prefix_sum_small():
    assert inclusive_prefix_sum([1, 2, 3, 4]).tolist() == [1, 3, 6, 10]
    assert inclusive_prefix_sum([1, 2, 3, 4], method="tree").tolist() == [1, 3, 6, 10]


def test_prefix_sum_empty():
    assert inclusive_prefix_sum(np.array([])).shape == (0,)
    assert inclusive_prefix_sum(np.array([]), method="tree").shape == (0,)


def test_prefix_sum_matches_left_fold():
    x = np.random.default_rng(0).normal(size=1000)
    np.testing.assert_allclose(inclusive_prefix_sum(x), left_fold(x), rtol=0, atol=1e-12)
    np.testing.assert_allclose(inclusive_prefix_sum(x, "tree"), left_fold(x), rtol=0, atol=1e-11)


def test_prefix_sum_unknown_method():
    with pytest.raises(ConfigError):
        inclusive_prefix_sum([1.0], method="fft")


@given(st.integers(1, 3000))
def test_tree_scan_work_bound(n):
    out, ops = tree_scan(np.ones(n))
    assert ops <= 2 * n - 2
    np.testing.assert_array_equal(out, np.arange(1, n + 1))


@given(arrays(np.float64, st.integers(0, 200), elements=finite))
def test_tree_scan_equals_sequential(x):
    np.testing.assert_allclose(tree_scan(x)[0], np.cumsum(x), rtol=1e-9, atol=1e-9)


def test_tree_scan_other_operators():
    x = np.random.default_rng(1).normal(size=(3, 37))
    np.testing.assert_array_equal(tree_scan(x, np.maximum)[0], np.maximum.accumulate(x, axis=-1))


# ---------------------------------------------------------------------------
# angle_prefix / wrap_angle

def test_angle_prefix_quarter_turns():
    out = angle_prefix([math.pi / 2] * 4, wrap=True)
    np.testing.assert_allclose(out, [math.pi / 2, math.pi, -math.pi / 2, 0.0], atol=1e-15)


@given(arrays(np.float64, st.integers(0, 50), elements=finite))
def test_angle_prefix_unwrapped_is_prefix_sum(x):
    np.testing.assert_array_equal(angle_prefix(x, wrap=False), inclusive_prefix_sum(x))


def test_wrap_convention():
    assert wrap_angle(-math.pi) == math.pi
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)
    x = np.random.default_rng(2).normal(scale=100, size=1000)
    w = wrap_angle(x)
    assert np.all(w > -math.pi) and np.all(w <= math.pi)
    np.testing.assert_allclose(np.exp(1j * w), np.exp(1j * x), atol=1e-12)


def test_angle_prefix_long_wrap_precision():
    n = 10 ** 5
    x = np.full(n, 0.1)
    wrapped = angle_prefix(x, wrap=True)
    # exact unwrapped sums of the float 0.1 in extended precision
    exact = np.arange(1, n + 1, dtype=np.longdouble) * np.longdouble(0.1)
    ref = np.cos(exact) + 1j * np.sin(exact)
    err = np.abs(np.exp(1j * wrapped) - ref.astype(complex))
    assert err.max() < 1e-9


# ---------------------------------------------------------------------------
# separable_convolve

def test_separable_convolve_prefix_sum():
    np.testing.assert_array_equal(separable_convolve(np.ones(3), np.ones(3), [1, 2, 3]), [1, 3, 6])


def test_separable_convolve_zero_input():
    rng = np.random.default_rng(3)
    f = rng.normal(size=5) + 1j * rng.normal(size=5)
    assert np.all(separable_convolve(f, f, np.zeros(5)) == 0)


def test_separable_convolve_double_loop():
    rng = np.random.default_rng(4)
    L = 8
    f = rng.normal(size=L) + 1j * rng.normal(size=L)
    g = rng.normal(size=L) + 1j * rng.normal(size=L)
    u = rng.normal(size=L)
    ref = [sum((f[t] * g[k]).real * u[k] for k in range(t + 1)) for t in range(L)]
    np.testing.assert_allclose(separable_convolve(f, g, u), ref, rtol=1e-12, atol=1e-12)


def test_separable_convolve_length_mismatch():
    with pytest.raises(ContractError):
        separable_convolve(np.ones(3), np.ones(4), np.ones(3))


def test_separable_convolve_tracks_two_buffers():
    with track_buffers() as tr:
        separable_convolve(np.ones(100, complex), np.ones(100, complex), np.ones(100))
    assert tr.totals["fg"] == 2 * 100 * 16
    assert tr.live == 0


# ---------------------------------------------------------------------------
# chunked_scan

def test_chunk_plan_validation():
    with pytest.raises(ConfigError):
        ChunkPlan(0)
    p = ChunkPlan(3)
    assert p.num_chunks(10) == 4
    assert p.chunk_len * p.num_chunks(10) >= 10
    assert p.bounds(7) == [(0, 3), (3, 6), (6, 7)]


def test_chunked_scan_small():
    assert chunked_scan(np.ones(5), ChunkPlan(2)).tolist() == [1, 2, 3, 4, 5]


@given(arrays(np.float64, st.integers(0, 40), elements=finite), st.integers(1, 50))
def test_chunked_scan_single_chunk_identical(x, extra):
    out = chunked_scan(x, ChunkPlan(len(x) + extra))
    np.testing.assert_array_equal(out, np.cumsum(x))


def test_chunked_scan_cross_chunk_agreement():
    x = np.random.default_rng(5).normal(size=10 ** 4)
    ref = left_fold(x)
    for c in (1, 7, 2048):
        out = chunked_scan(x, ChunkPlan(c))
        assert np.max(np.abs(out - ref)) / np.max(np.abs(ref)) <= 1e-12


def test_chunked_scan_other_combines():
    x = np.random.default_rng(6).uniform(0.5, 1.5, size=(2, 100))
    np.testing.assert_allclose(chunked_scan(x, ChunkPlan(7), np.multiply), np.cumprod(x, axis=-1), rtol=1e-12)
    np.testing.assert_array_equal(chunked_scan(x, ChunkPlan(7), np.maximum), np.maximum.accumulate(x, axis=-1))


def test_chunked_scan_rejects_non_ufunc():
    with pytest.raises(ContractError):
        chunked_scan(np.ones(3), ChunkPlan(2), combine=lambda a, b: a + b)


# ---------------------------------------------------------------------------
# separable recurrence

def recurrence_loop(w, x0, angle=None, log_decay=None):
    x = np.empty(w.shape, dtype=complex)
    cur = np.asarray(x0, dtype=complex)
    for t in range(w.shape[-1]):
        a = 0.0
        if angle is not None:
            a = a + 1j * angle[..., t]
        if log_decay is not None:
            a = a + log_decay[..., t]
        cur = np.exp(a) * cur + w[..., t]
        x[..., t] = cur
    return x


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 80), st.integers(1, 30), st.integers(0, 2 ** 31))
def test_separability_identity_rotation(L, chunk, seed):
    rng = np.random.default_rng(seed)
    angle = rng.normal(scale=2.0, size=(3, L))
    w = rng.normal(size=(3, L)) + 1j * rng.normal(size=(3, L))
    x0 = rng.normal(size=3) + 1j * rng.normal(size=3)
    ref = recurrence_loop(w, x0, angle=angle)
    got = linear_recurrence(w, x0, angle=angle, plan=ChunkPlan(chunk))
    assert np.max(np.abs(got - ref)) / np.max(np.abs(ref)) < 1e-10


def test_separable_decay_long_sequence_stays_finite():
    # cumulative decay far beyond exp overflow; sub-segmentation keeps it finite
    rng = np.random.default_rng(7)
    L = 5000
    log_decay = -rng.uniform(0.5, 2.0, size=(2, L))
    w = rng.normal(size=(2, L))
    got = linear_recurrence(w, 0.0, log_decay=log_decay, plan=ChunkPlan(4096))
    ref = recurrence_loop(w, 0.0, log_decay=log_decay).real
    assert np.all(np.isfinite(got))
    assert np.max(np.abs(got - ref)) / np.max(np.abs(ref)) < 1e-10


def test_reverse_recurrence_matches_loop():
    rng = np.random.default_rng(8)
    L = 30
    angle = rng.normal(size=(2, L))
    c = rng.normal(size=(2, L)) + 1j * rng.normal(size=(2, L))
    z = reverse_segment_recurrence(c, np.zeros(2), angle=angle)
    ref = np.empty_like(c)
    cur = np.zeros(2, complex)
    for t in reversed(range(L)):
        nxt = np.exp(-1j * angle[:, t + 1]) * cur if t + 1 < L else 0
        cur = nxt + c[:, t]
        ref[:, t] = cur
    np.testing.assert_allclose(z, ref, atol=1e-12)


def test_segment_recurrence_empty():
    out = segment_recurrence(np.zeros((2, 0)), np.zeros(2), angle=np.zeros((2, 0)))
    assert out.shape == (2, 0)
