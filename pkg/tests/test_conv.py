"""conv2d / depthwise separable / bilinear_sample: oracles and gradients."""

import numpy as np
import pytest

from lidarpan import Param, ShapeError, Tensor
from lidarpan.conv import bilinear_sample, conv2d, depthwise_separable_conv
from lidarpan.gradcheck import grad_check


def rnd(shape, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return rng.uniform(-2, 2, size=shape).astype(dtype)


def test_delta_kernel_is_identity():
    x = Tensor(rnd((1, 5, 5), 1, np.float32), dtype=np.float32)
    w = np.zeros((1, 1, 3, 3), dtype=np.float32)
    w[0, 0, 1, 1] = 1.0
    out = conv2d(x, Param(w), Param(np.zeros(1, dtype=np.float32)))
    assert np.allclose(out.data, x.data, atol=0)


def test_constant_input_all_ones_kernel_valid():
    c = 0.7
    x = Tensor(np.full((1, 6, 6), c, dtype=np.float32))
    w = Param(np.ones((1, 1, 3, 3), dtype=np.float32))
    out = conv2d(x, w, None, padding="valid")
    assert out.shape == (1, 4, 4)
    assert np.allclose(out.data, 9 * c, atol=1e-6)


def test_channel_mismatch_raises():
    x = Tensor(np.zeros((3, 4, 4), dtype=np.float32))
    w = Param(np.zeros((2, 4, 3, 3), dtype=np.float32))
    with pytest.raises(ShapeError) as exc:
        conv2d(x, w)
    assert exc.value.details["x"] == [3, 4, 4]
    assert exc.value.details["w"] == [2, 4, 3, 3]


def test_stride_and_dilation_shapes():
    x = Tensor(np.zeros((2, 9, 12), dtype=np.float32))
    w = Param(np.zeros((4, 2, 3, 3), dtype=np.float32))
    assert conv2d(x, w, stride=2).shape == (4, 5, 6)
    assert conv2d(x, w, dilation=(2, 3)).shape == (4, 9, 12)
    assert conv2d(x, w, dilation=(2, 2), padding="valid").shape == (4, 5, 8)


@pytest.mark.parametrize("seed", range(3))
def test_conv2d_gradients_vs_finite_differences(seed):
    w = Param(rnd((2, 1, 3, 3), seed + 50))
    b = Param(rnd((2,), seed + 60))
    x = Tensor(rnd((1, 5, 5), seed), dtype=np.float64)
    assert grad_check(lambda t: conv2d(t, w, b), x, eps=1e-3) < 1e-3
    x2 = Tensor(rnd((1, 5, 5), seed), dtype=np.float64)
    assert grad_check(lambda p: conv2d(x2, p, b), w, eps=1e-3) < 1e-3
    assert grad_check(lambda p: conv2d(x2, w, p), b, eps=1e-3) < 1e-3


def test_depthwise_composed_identity_times_two():
    x = Tensor(rnd((1, 4, 4), 3, np.float32), dtype=np.float32)
    dw = np.zeros((1, 1, 3, 3), dtype=np.float32)
    dw[0, 0, 1, 1] = 1.0
    pw = np.full((1, 1, 1, 1), 2.0, dtype=np.float32)
    out = depthwise_separable_conv(x, Param(dw), Param(pw))
    assert np.allclose(out.data, 2 * x.data, atol=1e-6)


def test_depthwise_equals_composed_conv2d():
    # On a 2-channel input, depthwise+pointwise equals conv2d whose kernel
    # is the outer composition w[o,i,:,:] = pw[o,i] * dw[i,:,:].
    x = Tensor(rnd((2, 4, 4), 4, np.float32), dtype=np.float32)
    dw = rnd((2, 1, 3, 3), 5, np.float32)
    pw = rnd((3, 2, 1, 1), 6, np.float32)
    composed = pw[:, :, 0, 0][:, :, None, None] * dw[:, 0][None, :, :, :]
    a = depthwise_separable_conv(x, Param(dw), Param(pw)).data
    b = conv2d(x, Param(composed), None).data
    assert np.allclose(a, b, atol=1e-5)


@pytest.mark.parametrize("seed", range(3))
def test_depthwise_gradients(seed):
    dw = Param(rnd((2, 1, 3, 3), seed + 70))
    pw = Param(rnd((3, 2, 1, 1), seed + 80))
    x = Tensor(rnd((2, 5, 5), seed + 90), dtype=np.float64)
    assert grad_check(lambda t: depthwise_separable_conv(t, dw, pw), x, eps=1e-3) < 1e-3
    assert grad_check(lambda p: depthwise_separable_conv(x, p, pw), dw, eps=1e-3) < 1e-3
    assert grad_check(lambda p: depthwise_separable_conv(x, dw, p), pw, eps=1e-3) < 1e-3


def test_bilinear_integer_coords_exact_gather():
    x = Tensor(rnd((2, 4, 5), 8, np.float32), dtype=np.float32)
    rows = np.array([[0.0, 3.0], [2.0, 1.0]], dtype=np.float32)
    cols = np.array([[0.0, 4.0], [1.0, 3.0]], dtype=np.float32)
    out = bilinear_sample(x, Tensor(np.stack([rows, cols]), dtype=np.float32))
    expect = x.data[:, rows.astype(int), cols.astype(int)]
    assert np.array_equal(out.data, expect)


def test_bilinear_center_of_2x2():
    img = Tensor(np.array([[[0.0, 1.0], [2.0, 3.0]]], dtype=np.float32))
    coords = Tensor(np.full((2, 1, 1), 0.5, dtype=np.float32))
    assert bilinear_sample(img, coords).data[0, 0, 0] == pytest.approx(1.5)


def test_bilinear_clamps_out_of_range():
    img = Tensor(np.array([[[0.0, 1.0], [2.0, 3.0]]], dtype=np.float32))
    coords = Tensor(np.array([[[-5.0]], [[9.0]]], dtype=np.float32))
    assert bilinear_sample(img, coords).data[0, 0, 0] == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(3))
def test_bilinear_coord_gradients_away_from_integers(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(-2, 2, (2, 6, 6)), dtype=np.float64)
    # keep fractional parts well inside (0, 1): 1e-2 exclusion margin
    rows = rng.uniform(0.2, 4.8, (3, 3))
    rows = np.floor(rows) + np.clip(rows - np.floor(rows), 0.1, 0.9)
    cols = rng.uniform(0.2, 4.8, (3, 3))
    cols = np.floor(cols) + np.clip(cols - np.floor(cols), 0.1, 0.9)
    coords = Tensor(np.stack([rows, cols]), dtype=np.float64)
    assert grad_check(lambda c: bilinear_sample(x, c), coords, eps=1e-3) < 1e-3
    coords2 = Tensor(np.stack([rows, cols]), dtype=np.float64)
    assert grad_check(lambda t: bilinear_sample(t, coords2), x, eps=1e-3) < 1e-3
