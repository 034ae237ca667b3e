import math

import numpy as np
import pytest

from helpers import random_block
from repquant.blocks import BlockConfig, LossMode, NetworkSpec, RepBlock, build_network
from repquant.checkpoint import encode
from repquant.data import synth_dataset
from repquant.errors import ConfigError, TrainingDivergedError
from repquant.tensor import Tensor, grad_check
from repquant.training import (OptimConfig, cosine_lr, custom_l2, default_decay_mask, denominator_statistic, eq5_l2,
                               measured_denominator,
                               lemma1_gap, plain_l2, sgd_step, train)


def kernel_reg_oracle(k3, k1, t3, t1, normalize=True):
    """Element-by-element evaluation of the kernel regularizer."""
    total = 0.0
    c2, cg = k3.shape[:2]
    for o in range(c2):
        for i in range(cg):
            for u in range(3):
                for v in range(3):
                    if (u, v) != (1, 1):
                        total += float(k3[o, i, u, v]) ** 2
            eq = float(k3[o, i, 1, 1]) * t3[o] + float(k1[o, i, 0, 0]) * t1[o]
            total += eq * eq / ((t3[o] ** 2 + t1[o] ** 2) if normalize else 1.0)
    return total


def unit_pair_block():
    b = RepBlock(BlockConfig.for_variant("S0", 1, 1, stride=2), dtype=np.float64)
    b.w3.weight.data[:] = 0
    b.w3.weight.data[0, 0, 1, 1] = 1
    b.w1.weight.data[:] = 1
    for bn in (b.bn3, b.bn1):
        bn.running_var[:] = 1 - bn.eps  # t = 1
    return b


def test_custom_l2_hand_example():
    b = unit_pair_block()
    assert b.bn3.coefficient()[0] == pytest.approx(1.0, abs=1e-15)
    assert float(custom_l2(b).data) == pytest.approx(2.0, abs=1e-12)
    assert float(eq5_l2(b).data) == pytest.approx(4.0, abs=1e-12)


def test_regularizers_zero_at_zero_kernels():
    b = random_block("S0", 4, 4, seed=1)
    b.w3.weight.data[:] = 0
    b.w1.weight.data[:] = 0
    assert float(custom_l2(b).data) == 0.0 and float(eq5_l2(b).data) == 0.0
    assert float(plain_l2([b.w3.weight, b.w1.weight]).data) == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_regularizers_match_oracle(seed):
    b = random_block("S0", 4, 4, groups=2 if seed % 2 else 1, seed=seed, dtype=np.float64)
    t3, t1 = b.bn3.coefficient(), b.bn1.coefficient()
    k3, k1 = b.w3.weight.data, b.w1.weight.data
    assert float(custom_l2(b).data) == pytest.approx(kernel_reg_oracle(k3, k1, t3, t1), rel=1e-12)
    assert float(eq5_l2(b).data) == pytest.approx(kernel_reg_oracle(k3, k1, t3, t1, False), rel=1e-12)
    assert float(plain_l2([b.w3.weight, b.w1.weight]).data) == pytest.approx((k3 ** 2).sum() + (k1 ** 2).sum(),
                                                                             rel=1e-12)


def test_no_denominator_dominates_when_denominator_at_least_one():
    rng = np.random.default_rng(0)
    for seed in range(20):
        b = random_block("S0", 4, 4, seed=seed, dtype=np.float64)
        for bn in (b.bn3, b.bn1):
            bn.gamma.data = rng.uniform(0.8, 2.0, 4)
            bn.running_var = rng.uniform(0.1, 0.6, 4)
        assert np.all(b.bn3.coefficient() ** 2 + b.bn1.coefficient() ** 2 >= 1)
        assert float(eq5_l2(b).data) >= float(custom_l2(b).data) >= 0


def test_plain_l2_ones():
    assert float(plain_l2([Tensor(np.ones((2, 2, 1, 1)))]).data) == 4.0


@pytest.mark.parametrize("fn", [custom_l2, eq5_l2])
def test_regularizer_gradients_and_detachment(fn):
    b = random_block("S0", 4, 4, seed=3, dtype=np.float64)
    assert grad_check(lambda: fn(b), [b.w3.weight, b.w1.weight]) <= 1e-3
    fn(b).backward()
    for bn in (b.bn3, b.bn1):
        assert bn.gamma.grad is None and bn.beta.grad is None
    rv = b.bn3.running_var.copy()
    fn(b).backward()
    assert np.array_equal(rv, b.bn3.running_var)


def test_plain_l2_gradient():
    b = random_block("S4", 4, 4, seed=4, dtype=np.float64)
    assert grad_check(lambda: plain_l2([b.w3.weight, b.w1.weight]), [b.w3.weight, b.w1.weight]) <= 1e-3


# -- optimizer ----------------------------------------------------------------

def _scalar(v=1.0):
    return {"w.weight": Tensor.param(np.array([v]), dtype=np.float64)}


def test_sgd_trivial_cases():
    p = _scalar()
    p["w.weight"].grad = np.zeros(1)
    sgd_step(p, {}, 0.1, OptimConfig(), {"w.weight": False})
    assert p["w.weight"].data[0] == 1.0
    p["w.weight"].grad = np.ones(1)
    sgd_step(p, {}, 0.1, OptimConfig(momentum=0.0, weight_decay=0.0), {})
    assert p["w.weight"].data[0] == pytest.approx(0.9, abs=1e-15)


def test_sgd_two_step_momentum_with_decay():
    p, vel = _scalar(), {}
    cfg = OptimConfig(momentum=0.9, weight_decay=0.1)
    for _ in range(2):
        p["w.weight"].grad = np.ones(1)
        sgd_step(p, vel, 0.1, cfg, {"w.weight": True})
    # v1 = 1 + 0.1*1 = 1.1, th1 = 0.89; v2 = 0.9*1.1 + 1 + 0.1*0.89 = 2.079, th2 = 0.6821
    assert p["w.weight"].data[0] == pytest.approx(0.6821, abs=1e-12)
    assert vel["w.weight"][0] == pytest.approx(2.079, abs=1e-12)


def test_sgd_shape_mismatch():
    p = _scalar()
    p["w.weight"].grad = np.ones(2)
    with pytest.raises(ConfigError):
        sgd_step(p, {}, 0.1, OptimConfig(), {})


def test_cosine_lr():
    assert cosine_lr(0, 100, 0.1) == 0.1
    assert cosine_lr(100, 100, 0.1) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(50, 100, 0.1) == pytest.approx(0.05, abs=1e-15)
    assert cosine_lr(25, 100, 1.0) == pytest.approx((1 + math.cos(math.pi / 4)) / 2)
    with pytest.raises(ConfigError):
        cosine_lr(101, 100, 0.1)


def test_decay_mask_policy():
    net = build_network(NetworkSpec.a0_mini(variant="S0"), 0)
    plain = default_decay_mask(net, LossMode.PLAIN_L2)
    custom = default_decay_mask(net, LossMode.CUSTOM_L2)
    for name, on in plain.items():
        is_bn = name.endswith((".gamma", ".beta"))
        assert on == (not is_bn and name.endswith(".weight"))
    assert not any(custom.values())
    assert all(v for k, v in default_decay_mask(net, LossMode.CUSTOM_L2, decay_bn=True).items()
               if k.endswith((".gamma", ".beta")))


# -- training loop --------------------------------------------------------------

def small_data(seed=0, n=128, classes=10):
    return synth_dataset(seed, n, classes)


def test_lr_zero_keeps_parameters():
    net = build_network(NetworkSpec.a0_mini(variant="S0"), 0)
    before = {k: v.data.copy() for k, v in net.named_parameters().items()}
    train(net, small_data(), OptimConfig(lr0=0.0, epochs=2, batch_size=32), LossMode.CUSTOM_L2)
    assert all(np.array_equal(before[k], v.data) for k, v in net.named_parameters().items())


def test_training_bit_identical_rerun():
    blobs = []
    for _ in range(2):
        net = build_network(NetworkSpec.a0_mini(variant="S0"), 5)
        hist = train(net, small_data(1), OptimConfig(epochs=2, batch_size=32, seed=5), LossMode.CUSTOM_L2)
        blobs.append((encode(net), hist.loss))
    assert blobs[0][0] == blobs[1][0] and blobs[0][1] == blobs[1][1]


def test_history_shape_and_denominator():
    net = build_network(NetworkSpec.a0_mini(variant="S0"), 0)
    ev = small_data(9, 64)
    hist = train(net, small_data(), OptimConfig(epochs=3, batch_size=32), LossMode.CUSTOM_L2, eval_dataset=ev)
    for col in (hist.loss, hist.accuracy, hist.lr, hist.lemma1_gap, hist.denominator, hist.eval_accuracy):
        assert len(col) == 3
    expected = sum(float((b.bn3.coefficient() ** 2).sum() + (b.bn1.coefficient() ** 2).sum()) for b in net.blocks)
    assert hist.denominator[-1] == pytest.approx(expected, rel=1e-12)
    assert denominator_statistic(build_network(NetworkSpec.a0_mini(variant="S4"), 0)) == 0.0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_two_class_blobs_reach_95_percent(seed):
    data = synth_dataset(seed, 256, 2)
    net = build_network(NetworkSpec.a0_mini(variant="S4", num_classes=2), seed)
    hist = train(net, data, OptimConfig(epochs=10, batch_size=32, seed=seed), LossMode.PLAIN_L2)
    assert hist.accuracy[-1] >= 0.95


def test_divergence_names_block():
    net = build_network(NetworkSpec(widths=(4, 8), blocks=(1, 1), variant="S4"), 0)
    net.blocks[1].w3.weight.data[0, 0, 0, 0] = np.inf
    with pytest.raises(TrainingDivergedError, match=r"blocks\.1/3x3"):
        train(net, small_data(), OptimConfig(epochs=1, batch_size=32), LossMode.PLAIN_L2)


def test_kernel_regularizer_rejects_missing_bn():
    net = build_network(NetworkSpec.a0_mini(variant="S3"), 0)
    with pytest.raises(ConfigError):
        train(net, small_data(), OptimConfig(epochs=1, batch_size=32), LossMode.CUSTOM_L2)


# -- tied-shift monitor -------------------------------------------------------------

def test_lemma_gap_zero_at_init_and_undefined_without_bn():
    net = build_network(NetworkSpec.a0_mini(variant="S2"), 0)
    assert all(lemma1_gap(b) == 0.0 for b in net.blocks)
    with pytest.raises(ConfigError):
        lemma1_gap(RepBlock(BlockConfig.for_variant("S3", 4, 4)))


def test_lemma_holds_and_control_breaks_it():
    data = synth_dataset(0, 32 * 10, 10)
    net = build_network(NetworkSpec.a0_mini(variant="S2"), 0)
    hist = train(net, data, OptimConfig(epochs=6, batch_size=32), LossMode.PLAIN_L2, max_steps=60)
    assert len(hist.step_lemma1_gap) == 60
    assert all(g <= 1e-6 * (1 + s) for g, s in zip(hist.step_lemma1_gap, hist.step_beta_scale))
    ctrl = build_network(NetworkSpec.a0_mini(variant="S2"), 0)
    mask = {f"{b.name}.bn3.beta": True for b in ctrl.blocks}
    hist = train(ctrl, data, OptimConfig(epochs=6, batch_size=32, weight_decay=1e-2, decay_mask=mask),
                 LossMode.PLAIN_L2, max_steps=60)
    assert max(hist.step_lemma1_gap) > 1e-3


def test_measured_denominator_matches_batch_variances():
    from oracles import conv_loop
    net = build_network(NetworkSpec(widths=(4,), blocks=(1,), variant="S0"), 2, dtype=np.float64)
    data = small_data(3, 96)
    b = net.blocks[0]
    expected = 0.0
    for k in (b.w3, b.w1):
        pad = k.weight.shape[-1] // 2
        var = np.mean([conv_loop(x.astype(np.float64), k.weight.data, None, k.stride, pad)
                       .var(axis=(0, 2, 3), ddof=1) for x in (data.images[:32], data.images[32:64])], axis=0)
        expected += float((1.0 / (var + 1e-5)).sum())
    assert measured_denominator(net, data, batches=2, batch_size=32) == pytest.approx(expected, rel=1e-9)
    assert np.array_equal(b.bn3.running_var, np.ones(4))  # original untouched
