import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from bpt.binarize import (
    ROW,
    TENSOR,
    LatentWeight,
    activation_binarize,
    binary_linear,
    dense_binary_linear,
    median_threshold,
    nonneg_binarize,
    sign_binarize,
    ste_grad,
    ste_mask,
    weight_binarize,
)
from bpt.bitops import DimensionError


def test_sign_binarize():
    assert sign_binarize(0.0) == 1
    assert sign_binarize(-0.3) == -1
    assert list(sign_binarize([2.5, -0.0, -7])) == [1, 1, -1]


def test_nonneg_binarize():
    assert nonneg_binarize(0.5) == 1
    assert nonneg_binarize(0.49) == 0
    assert not nonneg_binarize(np.full(8, 0.125)).any()
    with pytest.raises(ValueError):
        nonneg_binarize([0.2, -0.1])


def test_median_threshold_rows():
    x = np.array([[0.1, 0.2, 0.9], [0.4, 0.3, 0.5]])
    assert np.allclose(median_threshold(x, axis=1), [[0.2], [0.4]])


def test_weight_binarize_examples():
    sb = weight_binarize(np.array([[1.0, -2.0, 3.0]]))
    assert list(sb.bits.unpack()[0]) == [1, -1, 1]
    assert sb.scale[0] == pytest.approx(2.0)
    sb = weight_binarize(np.array([[0.7, 0.7, 0.7], [-1.0, 1.0, 0.0]]))
    assert list(sb.bits.unpack()[0]) == [1, 1, 1]
    assert sb.scale[0] == pytest.approx(0.7)
    assert list(sb.bits.unpack()[1]) == [-1, 1, 1]
    sb = weight_binarize(np.array([[-1.0, 1.0]]))
    assert list(sb.bits.unpack()[0]) == [-1, 1]
    assert sb.scale[0] == 1.0


def test_weight_binarize_tensor_granularity():
    w = np.array([[1.0, -1.0], [3.0, -3.0]])
    assert np.allclose(weight_binarize(w, ROW).scale, [1.0, 3.0])
    assert np.allclose(weight_binarize(w, TENSOR).scale, [2.0, 2.0])


@given(st.integers(1, 6), st.integers(1, 40), st.floats(-5, 5), st.integers(0, 2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_weight_bits_invariant_to_row_shift(rows, cols, c, seed):
    w = np.random.default_rng(seed).normal(size=(rows, cols))
    # entries within rounding of the row mean may legitimately flip
    assume(np.abs(w - w.mean(axis=1, keepdims=True)).min() > 1e-9)
    assert weight_binarize(w).bits == weight_binarize(w + c).bits


def test_latent_weight_refreshes_mean():
    lw = LatentWeight([[1.0, 3.0]])
    assert lw.cached_mean[0, 0] == 2.0
    lw.shadow = np.array([[5.0, 7.0]])
    assert lw.cached_mean[0, 0] == 6.0
    lw.update(np.array([[-1.0, 1.0]]))
    assert np.allclose(lw.shadow, [[4.0, 8.0]])
    assert lw.cached_mean[0, 0] == 6.0
    assert list(weight_binarize(lw).bits.unpack()[0]) == [-1, 1]
    with pytest.raises(DimensionError):
        LatentWeight([1.0, 2.0])


def test_activation_binarize_examples():
    sb = activation_binarize(np.array([1.0, -1.0, 1.0, -1.0]), signed=True)
    assert list(sb.bits.unpack()[0]) == [1, -1, 1, -1]
    assert sb.scale[0] == 1.0
    sb = activation_binarize(np.zeros(5), signed=True)
    assert sb.scale[0] == 0.0
    sb = activation_binarize(np.array([0.6, 0.4, 1.0]), signed=False)
    assert list(sb.bits.unpack()[0]) == [1, 0, 1]
    assert sb.scale[0] == pytest.approx(2.0 / 3)


@given(st.integers(1, 5), st.integers(1, 30), st.floats(0.01, 100), st.integers(0, 2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_beta_scales_linearly(rows, cols, c, seed):
    a = np.random.default_rng(seed).normal(size=(rows, cols))
    base, scaled = activation_binarize(a, True), activation_binarize(c * a, True)
    assert np.allclose(scaled.scale, c * base.scale, rtol=1e-12)
    assert scaled.bits == base.bits


def test_binary_linear_examples():
    assert np.all(binary_linear(np.full((3, 4), 2.0), np.zeros(4), signed_act=True) == 0)
    y = binary_linear(np.array([[1.0, -1.0]]), np.array([2.0, -2.0]), signed_act=True)
    assert y.shape == (1,)
    assert y[0] == pytest.approx(4.0)
    with pytest.raises(DimensionError):
        binary_linear(np.ones((2, 3)), np.ones(4), signed_act=True)


def _rel(got, ref, ab, wb):
    """Error relative to the sum of absolute terms of each dot product."""
    scale = np.abs(ab) @ np.abs(wb).T
    return float(np.max(np.abs(got - ref) / np.maximum(scale, 1e-300)))


@given(st.integers(1, 16), st.integers(1, 140), st.integers(1, 8), st.booleans(),
       st.sampled_from([32, 64]), st.sampled_from([ROW, TENSOR]), st.integers(0, 2**32 - 1))
@settings(max_examples=300, deadline=None)
def test_binary_linear_matches_dense_expansion(out, k, rows, signed, lane, gran, seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(out, k))
    a = rng.normal(size=(rows, k)) if signed else rng.uniform(0, 1, size=(rows, k))
    got = binary_linear(w, a, signed_act=signed, granularity=gran, lane_width=lane)
    ref = dense_binary_linear(w, a, signed_act=signed, granularity=gran)
    ab, wb = activation_binarize(a, signed).dense(), weight_binarize(w, gran).dense()
    expanded = ab @ wb.T
    assert _rel(got, ref, ab, wb) <= 1e-6
    assert _rel(got, expanded, ab, wb) <= 1e-6


def test_ste_examples():
    assert ste_grad(3.0, 0.5) == 3.0
    assert ste_grad(3.0, 1.5) == 0.0
    assert ste_grad(3.0, 1.0) == 3.0
    assert ste_grad(3.0, -1.0) == 3.0
    with pytest.raises(DimensionError):
        ste_grad(np.ones(3), np.ones(2))


@given(st.lists(st.floats(-3, 3), min_size=1, max_size=50))
def test_ste_region_exact(xs):
    x = np.array(xs)
    up = np.arange(1.0, len(x) + 1)
    g = ste_grad(up, x)
    assert np.array_equal(g[np.abs(x) > 1], np.zeros(int((np.abs(x) > 1).sum())))
    assert np.array_equal(g[np.abs(x) <= 1], up[np.abs(x) <= 1])
    assert np.array_equal(ste_mask(x), np.abs(x) <= 1)
