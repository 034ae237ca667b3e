import numpy as np
import pytest

from helpers import block_grid, random_block, randomize_bn
from repquant.blocks import BlockConfig, NetworkSpec, RepBlock, build_network
from repquant.errors import ConfigError
from repquant.fusion import (block_forward_deploy, equivalent_kernel, fold_bn, fold_coefficients, fuse_block,
                             fused_arrays, identity_kernel, pad_1x1_to_3x3, to_deploy)
from repquant.tensor import BNParams, ConvKernel, Tensor, batch_norm_infer, conv2d, grad_check, sum_all, square_sum


def test_fold_bn_inverse_identity():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(4, 3, 3, 3))
    mu, var = rng.normal(size=4), rng.uniform(0.1, 2, 4)
    k = fold_bn(ConvKernel(Tensor(w)), BNParams(Tensor(np.sqrt(var + 1e-5)), Tensor(mu), mu, var))
    np.testing.assert_allclose(k.weight.data, w, rtol=1e-15)
    np.testing.assert_allclose(k.bias.data, 0, atol=1e-15)


def test_fold_bn_dead_channel_coefficient():
    bn = BNParams(Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.zeros(2), 1e-5)
    k = fold_bn(ConvKernel(Tensor(np.ones((2, 1, 1, 1)))), bn)
    np.testing.assert_allclose(k.weight.data.ravel(), 316.2278, rtol=1e-6)
    assert k.weight.data[0, 0, 0, 0] == 1 / np.sqrt(1e-5)


def test_fold_bn_matches_conv_then_bn():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 4, 7, 7)).astype(np.float32)
    k = ConvKernel(Tensor(rng.normal(size=(6, 2, 3, 3)).astype(np.float32)),
                   Tensor(rng.normal(size=6).astype(np.float32)), 2, 1, 2)
    bn = BNParams.init(6)
    randomize_bn(bn, rng)
    ref = batch_norm_infer(conv2d(Tensor(x), k), bn).data
    np.testing.assert_allclose(conv2d(Tensor(x), fold_bn(k, bn)).data, ref, atol=1e-5)


def test_pad_1x1():
    k = pad_1x1_to_3x3(ConvKernel(Tensor(np.array([[[[2.5]]]]))))
    assert k.weight.data[0, 0].tolist() == [[0, 0, 0], [0, 2.5, 0], [0, 0, 0]]
    assert not pad_1x1_to_3x3(ConvKernel(Tensor(np.zeros((2, 2, 1, 1))))).weight.data.any()
    rng = np.random.default_rng(2)
    k1 = ConvKernel(Tensor(rng.normal(size=(3, 2, 1, 1))))
    x = Tensor(rng.normal(size=(1, 2, 6, 6)))
    assert np.array_equal(conv2d(x, pad_1x1_to_3x3(k1)).data, conv2d(x, k1).data)
    with pytest.raises(ConfigError):
        pad_1x1_to_3x3(ConvKernel(Tensor(np.zeros((1, 1, 3, 3)))))


def test_identity_kernel():
    w = identity_kernel(2, 1).weight.data
    expected = np.zeros((2, 2, 3, 3))
    expected[0, 0, 1, 1] = expected[1, 1, 1, 1] = 1
    assert np.array_equal(w, expected)
    x = np.random.default_rng(3).normal(size=(2, 4, 5, 5)).astype(np.float32)
    for g in (1, 2, 4):
        assert np.array_equal(conv2d(Tensor(x), identity_kernel(4, g)).data, x)
    with pytest.raises(ConfigError):
        identity_kernel(4, 3)


def test_fuse_s3_zero_weights_is_identity():
    b = RepBlock(BlockConfig.for_variant("S3", 4, 4))
    b.w3.weight.data[:] = 0
    b.w1.weight.data[:] = 0
    f = fuse_block(b)
    assert np.array_equal(f.weight.data, identity_kernel(4).weight.data)
    assert np.allclose(f.bias.data, 0)


def test_deploy_zero_weights_post_bn_constant():
    b = RepBlock(BlockConfig.for_variant("S4", 3, 4))
    b.w3.weight.data[:] = 0
    b.w1.weight.data[:] = 0
    b.bn_post.beta.data[:] = [0.5, -1.0, 2.0, 0.0]
    y = block_forward_deploy(fuse_block(b), np.random.default_rng(4).normal(size=(2, 3, 5, 5)).astype(np.float32))
    np.testing.assert_allclose(y.data, np.maximum(b.bn_post.beta.data, 0)[None, :, None, None] * np.ones((2, 4, 5, 5)),
                               atol=1e-6)


@pytest.mark.parametrize("variant,groups", [("S0", 1), ("S0", 2), ("S4", 1), ("S4", 2)])
def test_fuse_random_blocks_100_probes(variant, groups):
    b = random_block(variant, 8, 8, 1, groups, seed=5)
    f = fuse_block(b)
    rng = np.random.default_rng(6)
    for _ in range(100):
        x = rng.uniform(-1, 1, (1, 8, 6, 6)).astype(np.float32)
        assert np.max(np.abs(block_forward_deploy(f, x).data - b.forward(x).data)) <= 1e-4


@pytest.mark.parametrize("variant,groups,stride,width", block_grid())
def test_fusion_grid_double_precision(variant, groups, stride, width):
    b = random_block(variant, width, width, stride, groups, seed=width + stride, dtype=np.float64,
                     bias_on_unnormalized_branches=True)
    f = fuse_block(b, tol=1e-6)
    x = np.random.default_rng(7).uniform(-1, 1, (2, width, 8, 8))
    assert np.max(np.abs(block_forward_deploy(f, x).data - b.forward(x).data)) <= 1e-6


def test_fuse_twice_rejected():
    b = random_block("S0", 4, 4)
    f = fuse_block(b)
    with pytest.raises(ConfigError):
        fuse_block(f)
    net = build_network(NetworkSpec(widths=(4,), blocks=(2,)), 0)
    with pytest.raises(ConfigError):
        to_deploy(to_deploy(net))


def test_deploy_network_matches_eval_network():
    net = build_network(NetworkSpec.a0_mini(variant="S0", groups=2), 3)
    rng = np.random.default_rng(8)
    for b in net.blocks:
        for bn in b.bn_layers().values():
            randomize_bn(bn, rng)
    x = rng.uniform(-1, 1, (2, 3, 32, 32)).astype(np.float32)
    dep = to_deploy(net)
    ref = net.forward(x).data
    assert np.max(np.abs(dep.forward(x).data - ref)) <= 1e-4 * max(1, np.abs(ref).max())


def test_equivalent_kernel():
    b = random_block("S0", 4, 6, stride=2, seed=9)
    zero = random_block("S0", 4, 6, stride=2, seed=9)
    zero.w3.weight.data[:] = 0
    zero.w1.weight.data[:] = 0
    assert not equivalent_kernel(zero).data.any()
    w_fused, _ = fused_arrays(b)  # no identity branch at stride 2
    np.testing.assert_allclose(equivalent_kernel(b).data[:, :, 0, 0], w_fused[:, :, 1, 1], rtol=1e-6)
    b64 = random_block("S0", 4, 4, seed=10, dtype=np.float64)
    assert b64.w3.weight.dtype == np.float64
    assert grad_check(lambda: square_sum(equivalent_kernel(b64)), [b64.w3.weight, b64.w1.weight]) <= 1e-3
    sum_all(equivalent_kernel(b64)).backward()
    assert b64.w3.weight.grad is not None
    assert b64.bn3.gamma.grad is None and b64.bn1.gamma.grad is None
    with pytest.raises(ConfigError):
        equivalent_kernel(random_block("S3", 4, 4))


def test_fold_coefficients_report():
    b = random_block("S0", 4, 4, seed=11)
    coefs = fold_coefficients(b)
    for key, bn in b.bn_layers().items():
        np.testing.assert_array_equal(coefs[key], bn.gamma.data.astype(np.float64) / np.sqrt(bn.running_var.astype(np.float64) + 1e-5))
