"""Elementwise operator suite: forward values and finite-difference grads."""

import numpy as np
import pytest

from lidarpan import Param, ShapeError, Tensor
from lidarpan.gradcheck import grad_check
from lidarpan.tensor import (
    add,
    affine,
    avg_pool2,
    channel_norm,
    concat_channels,
    dot_const,
    hadamard,
    leaky_relu,
    log_softmax_channelwise,
    sigmoid,
    softmax_channelwise,
    take,
    tmean,
    tsum,
    upsample_bilinear,
)


def rnd(shape, seed=0, lo=-2.0, hi=2.0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(lo, hi, size=shape).astype(dtype), dtype=dtype)


def test_sigmoid_symmetry_point():
    assert sigmoid(Tensor([0.0])).data[0] == pytest.approx(0.5)


def test_sigmoid_saturates_without_overflow():
    out = sigmoid(Tensor([-100.0, 100.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] < 1e-20 and out[1] == pytest.approx(1.0)


def test_softmax_uniform_on_equal_logits():
    x = Tensor(np.full((4, 3, 3), 1.7, dtype=np.float32))
    out = softmax_channelwise(x).data
    assert np.allclose(out, 0.25, atol=1e-6)


def test_softmax_sums_to_one_and_shift_invariant():
    x = rnd((5, 4, 6), seed=3, dtype=np.float32)
    out = softmax_channelwise(x).data
    assert np.allclose(out.sum(axis=0), 1.0, atol=1e-6)
    shifted = softmax_channelwise(Tensor(x.data + 0.93, dtype=np.float32)).data
    assert np.allclose(out, shifted, atol=1e-5)


def test_add_hadamard_shape_mismatch():
    with pytest.raises(ShapeError):
        add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        hadamard(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


def test_upsample_preserves_constant():
    x = Tensor(np.full((2, 3, 4), 2.5, dtype=np.float32))
    out = upsample_bilinear(x, 2).data
    assert out.shape == (2, 6, 8)
    assert np.allclose(out, 2.5, atol=1e-6)


def test_avg_pool2_blocks():
    x = Tensor(np.arange(16, dtype=np.float32).reshape(1, 4, 4))
    out = avg_pool2(x).data
    assert out.shape == (1, 2, 2)
    assert out[0, 0, 0] == pytest.approx((0 + 1 + 4 + 5) / 4)


def test_concat_and_take_roundtrip():
    a = rnd((2, 3, 3), 1)
    b = rnd((3, 3, 3), 2)
    cat = concat_channels([a, b])
    assert cat.shape == (5, 3, 3)
    idx = np.arange(2 * 9)
    assert np.allclose(take(cat, idx).data, a.data.reshape(-1))


def test_channel_norm_zero_mean_unit_var():
    x = rnd((3, 8, 8), 5, dtype=np.float32)
    g = Param(np.ones(3, dtype=np.float32))
    b = Param(np.zeros(3, dtype=np.float32))
    out = channel_norm(x, g, b).data
    assert np.allclose(out.mean(axis=(1, 2)), 0.0, atol=1e-5)
    assert np.allclose(out.std(axis=(1, 2)), 1.0, atol=1e-3)


def test_param_grad_accumulates_until_reset():
    p = Param(np.array([1.0, 2.0], dtype=np.float32))
    for _ in range(2):
        loss = tsum(hadamard(p, p))
        loss.backward()
    assert np.allclose(p.grad, [4.0, 8.0])
    p.reset_grad()
    assert np.allclose(p.grad, 0.0)


@pytest.mark.parametrize("seed", range(4))
def test_elementwise_gradients(seed):
    checks = [
        (lambda t: sigmoid(t), (3, 4, 4)),
        (lambda t: softmax_channelwise(t), (4, 3, 3)),
        (lambda t: log_softmax_channelwise(t), (4, 3, 3)),
        (lambda t: add(t, rnd((3, 4, 4), 99)), (3, 4, 4)),
        (lambda t: hadamard(t, rnd((3, 4, 4), 98)), (3, 4, 4)),
        (lambda t: affine(t, -2.0, 0.5), (3, 4, 4)),
        (lambda t: upsample_bilinear(t, 2), (2, 3, 4)),
        (lambda t: avg_pool2(t), (2, 4, 4)),
        (lambda t: concat_channels([t, rnd((2, 4, 4), 97)]), (3, 4, 4)),
        (lambda t: take(t, np.array([0, 5, 5, 11])), (3, 2, 2)),
        (lambda t: tmean(t), (3, 4, 4)),
        (lambda t: dot_const(t, np.arange(12.0)), (3, 2, 2)),
    ]
    for f, shape in checks:
        err = grad_check(f, rnd(shape, seed=seed + 10), eps=1e-3)
        assert err < 1e-3, f"{f} gradient error {err}"


@pytest.mark.parametrize("seed", range(4))
def test_leaky_relu_gradient_away_from_kink(seed):
    rng = np.random.default_rng(seed)
    data = rng.uniform(-2, 2, size=(3, 4, 4))
    data[np.abs(data) < 1e-2] = 0.5  # exclusion margin around the kink
    err = grad_check(lambda t: leaky_relu(t, 0.01), Tensor(data, dtype=np.float64), eps=1e-3)
    assert err < 1e-3


@pytest.mark.parametrize("seed", range(4))
def test_channel_norm_gradients(seed):
    x = rnd((3, 5, 5), seed)
    g = Param(np.random.default_rng(seed + 1).uniform(0.5, 1.5, 3), dtype=np.float64)
    b = Param(np.random.default_rng(seed + 2).uniform(-0.5, 0.5, 3), dtype=np.float64)
    assert grad_check(lambda t: channel_norm(t, g, b), x, eps=1e-3) < 1e-3
    x2 = rnd((3, 5, 5), seed)
    assert grad_check(lambda p: channel_norm(x2, p, b), g, eps=1e-3) < 1e-3
    assert grad_check(lambda p: channel_norm(x2, g, p), b, eps=1e-3) < 1e-3


def test_forward_determinism():
    x = rnd((4, 6, 6), 7, dtype=np.float32)
    a = softmax_channelwise(sigmoid(x)).data
    b = softmax_channelwise(sigmoid(x)).data
    assert np.array_equal(a, b)
