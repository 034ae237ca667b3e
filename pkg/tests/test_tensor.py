import numpy as np
import pytest

from oracles import bn_infer_loop, bn_train_loop, conv_loop
from repquant.errors import ConfigError, DegenerateBatchError, NumericError
from repquant.tensor import (BNParams, ConvKernel, Tensor, add, batch_norm_infer, batch_norm_train,
                             conv2d, cross_entropy, global_avg_pool, grad_check, linear, relu,
                             square_sum, sum_all)


def rand_bn(rng, c, dtype=np.float32):
    return BNParams(Tensor.param(rng.uniform(0.5, 1.5, c), dtype=dtype), Tensor.param(rng.normal(size=c), dtype=dtype),
                    rng.normal(size=c).astype(dtype), rng.uniform(0.1, 2.0, c).astype(dtype))


# -- conv2d -------------------------------------------------------------------

def test_conv_identity_1x1():
    x = np.random.default_rng(0).normal(size=(2, 3, 5, 5)).astype(np.float32)
    w = np.eye(3, dtype=np.float32)[:, :, None, None]
    y = conv2d(Tensor(x), ConvKernel(Tensor(w), Tensor(np.zeros(3, np.float32))))
    assert np.array_equal(y.data, x)


def test_conv_zero_kernel():
    x = np.random.default_rng(1).normal(size=(2, 4, 6, 6)).astype(np.float32)
    y = conv2d(Tensor(x), ConvKernel(Tensor(np.zeros((5, 4, 3, 3), np.float32)), padding=1))
    assert y.shape == (2, 5, 6, 6) and not y.data.any()


def test_conv_ramp_average_matches_loop():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    w = np.full((1, 1, 3, 3), 1 / 9)
    got = conv2d(Tensor(x), ConvKernel(Tensor(w), padding=1)).data
    ref = conv_loop(x, w, pad=1)
    np.testing.assert_allclose(got, ref, rtol=1e-14, atol=1e-14)
    assert got[0, 0, 1, 1] == pytest.approx(5.0)


@pytest.mark.parametrize("k,stride,pad,groups", [(3, 1, 1, 1), (3, 2, 1, 2), (1, 1, 0, 1), (1, 2, 0, 4),
                                                 (3, 2, 0, 1), (3, 1, 2, 2)])
def test_conv_matches_loop(k, stride, pad, groups):
    rng = np.random.default_rng(k * 10 + stride + groups)
    x = rng.normal(size=(2, 8, 8, 8))
    w = rng.normal(size=(8, 8 // groups, k, k))
    b = rng.normal(size=8)
    got = conv2d(Tensor(x), ConvKernel(Tensor(w), Tensor(b), stride, pad, groups)).data
    ref = conv_loop(x, w, b, stride, pad, groups)
    assert got.shape == ref.shape == (2, 8, (8 + 2 * pad - k) // stride + 1, (8 + 2 * pad - k) // stride + 1)
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_conv_float32_storage_close_to_loop():
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, (2, 8, 8, 8)).astype(np.float32)
    w = rng.normal(size=(8, 4, 3, 3)).astype(np.float32)
    got = conv2d(Tensor(x), ConvKernel(Tensor(w), padding=1, groups=2))
    assert got.data.dtype == np.float32
    np.testing.assert_allclose(got.data, conv_loop(x, w, pad=1, groups=2), rtol=1e-5, atol=1e-5)


def test_conv_errors():
    with pytest.raises(ConfigError):
        ConvKernel(Tensor(np.zeros((4, 2, 5, 5))))
    with pytest.raises(ConfigError):
        ConvKernel(Tensor(np.zeros((3, 2, 3, 3))), groups=2)
    k = ConvKernel(Tensor(np.zeros((4, 2, 3, 3))), padding=1)
    with pytest.raises(ConfigError):
        conv2d(Tensor(np.zeros((1, 3, 4, 4))), k)
    bad = np.zeros((1, 2, 4, 4))
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        conv2d(Tensor(bad), k)


# -- batch norm ---------------------------------------------------------------

def test_bn_train_constant_input_gives_beta():
    x = np.ones((4, 3, 2, 2), np.float32) * np.array([2.0, -1.0, 7.0], np.float32)[None, :, None, None]
    bn = BNParams.init(3)
    bn.gamma.data[:] = [3, 0.5, 2]
    bn.beta.data[:] = [0.25, -1, 4]
    y = batch_norm_train(Tensor(x), bn)
    assert np.array_equal(y.data.mean(axis=(0, 2, 3)), bn.beta.data)


def test_bn_train_standardized_passthrough():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 2, 4, 4))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    y = batch_norm_train(Tensor(x), BNParams.init(2, dtype=np.float64))
    np.testing.assert_allclose(y.data, x, rtol=1e-5, atol=1e-5)  # x / sqrt(1 + eps) shrink is relative


def test_bn_train_statistics_and_running_update():
    rng = np.random.default_rng(1)
    x = rng.normal(2.0, 3.0, size=(2, 8, 8, 8))
    bn = rand_bn(rng, 8, np.float64)
    rm0, rv0 = bn.running_mean.copy(), bn.running_var.copy()
    y = batch_norm_train(Tensor(x), bn, momentum=0.1)
    ref, mean, uvar = bn_train_loop(x, bn.gamma.data, bn.beta.data)
    np.testing.assert_allclose(y.data, ref, rtol=1e-12, atol=1e-12)
    v = x.var(axis=(0, 2, 3))
    np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), bn.beta.data, atol=1e-4)
    np.testing.assert_allclose(y.data.var(axis=(0, 2, 3)), bn.gamma.data ** 2 * v / (v + 1e-5), rtol=1e-4)
    np.testing.assert_allclose(bn.running_mean, 0.9 * rm0 + 0.1 * mean, rtol=1e-12)
    np.testing.assert_allclose(bn.running_var, 0.9 * rv0 + 0.1 * uvar, rtol=1e-12)


def test_bn_train_degenerate():
    with pytest.raises(DegenerateBatchError):
        batch_norm_train(Tensor(np.ones((1, 2, 1, 1))), BNParams.init(2))


def test_bn_infer_inverse_identity():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
    mu, var = rng.normal(size=3), rng.uniform(0.1, 2, 3)
    bn = BNParams(Tensor(np.sqrt(var + 1e-5)), Tensor(mu), mu, var)
    np.testing.assert_allclose(batch_norm_infer(Tensor(x), bn).data, x, atol=1e-6)


def test_bn_infer_singular_coefficient():
    x = np.random.default_rng(3).normal(size=(1, 2, 3, 3)).astype(np.float32)
    bn = BNParams(Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.zeros(2), 1e-5)
    y = batch_norm_infer(Tensor(x), bn)
    np.testing.assert_allclose(y.data, x * 316.2278, rtol=1e-6)
    assert bn.coefficient()[0] == 1 / np.sqrt(1e-5)


def test_bn_infer_matches_loop_and_scales_variance():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 8, 8, 8))
    bn = rand_bn(rng, 8, np.float64)
    y = batch_norm_infer(Tensor(x), bn).data
    np.testing.assert_allclose(y, bn_infer_loop(x, bn.gamma.data, bn.beta.data, bn.running_mean, bn.running_var),
                               rtol=1e-12, atol=1e-12)
    ratio = y.var(axis=(0, 2, 3)) / x.var(axis=(0, 2, 3))
    np.testing.assert_allclose(ratio, bn.gamma.data ** 2 / (1e-5 + bn.running_var), rtol=1e-3)


# -- elementwise --------------------------------------------------------------

def test_relu_and_add():
    assert relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data.tolist() == [0, 0, 2]
    rng = np.random.default_rng(5)
    xs = [rng.normal(size=(2, 3, 4, 4)) for _ in range(3)]
    assert np.array_equal(add([Tensor(xs[0]), Tensor(np.zeros_like(xs[0]))]).data, xs[0])
    got = add([Tensor(x) for x in xs]).data
    for idx in np.ndindex(got.shape):
        assert got[idx] == (xs[0][idx] + xs[1][idx]) + xs[2][idx]
    with pytest.raises(ConfigError):
        add([Tensor(xs[0]), Tensor(np.zeros((1, 1, 1, 1)))])


# -- gradients ----------------------------------------------------------------

def test_grad_check_conv_sum():
    rng = np.random.default_rng(6)
    x = Tensor.param(rng.normal(size=(2, 4, 5, 5)))
    k = ConvKernel(Tensor.param(rng.normal(size=(6, 2, 3, 3))), Tensor.param(rng.normal(size=6)), 2, 1, 2)
    assert grad_check(lambda: sum_all(conv2d(x, k)), [x, k.weight, k.bias]) <= 1e-3


def test_grad_check_nonlinear_chain():
    rng = np.random.default_rng(7)
    x = Tensor.param(rng.normal(size=(3, 4, 4, 4)))
    k = ConvKernel(Tensor.param(rng.normal(size=(4, 4, 3, 3))), padding=1)
    bn = rand_bn(rng, 4, np.float64)
    bn2 = rand_bn(rng, 4, np.float64)
    w = Tensor.param(rng.normal(size=(3, 4)))
    labels = np.array([0, 2, 1])

    def f():
        saved = bn.running_mean.copy(), bn.running_var.copy()
        h = relu(add([batch_norm_train(conv2d(x, k), bn), batch_norm_infer(x, bn2)]))
        bn.running_mean, bn.running_var = saved
        return cross_entropy(linear(global_avg_pool(h), w), labels)

    assert grad_check(f, [x, k.weight, bn.gamma, bn.beta, bn2.gamma, bn2.beta, w], h=1e-5) <= 1e-3


def test_grad_check_constant_and_square():
    p = Tensor.param(np.array([1.0, 2.0]))
    assert grad_check(lambda: Tensor(np.array(3.0)), [p]) == 0.0
    assert grad_check(lambda: square_sum(p), [p]) <= 1e-6


def test_backward_bit_identical_replay():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 4, 6, 6)).astype(np.float32)
    grads = []
    for _ in range(2):
        k = ConvKernel(Tensor.param(np.ones((4, 4, 3, 3)) * 0.1), padding=1)
        sum_all(relu(conv2d(Tensor(x), k))).backward()
        grads.append(k.weight.grad.copy())
    assert np.array_equal(grads[0], grads[1])
