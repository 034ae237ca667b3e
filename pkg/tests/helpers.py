"""Shared test fixtures that touch package objects (oracles.py stays package-free)."""
import numpy as np

from repquant.blocks import BlockConfig, RepBlock
from repquant.tensor import add, mul_const, square_sum
from repquant.training import OptimConfig, sgd_step


def randomize_bn(bn, rng):
    c = bn.channels
    dt = bn.gamma.dtype
    bn.gamma.data = rng.uniform(0.5, 1.5, c).astype(dt)
    bn.beta.data = rng.normal(0, 0.5, c).astype(dt)
    bn.running_mean = rng.normal(0, 0.5, c).astype(dt)
    bn.running_var = rng.uniform(0.2, 2.0, c).astype(dt)


def random_block(variant, c1, c2, stride=1, groups=1, seed=0, dtype=np.float32, **kw):
    rng = np.random.default_rng(seed)
    b = RepBlock(BlockConfig.for_variant(variant, c1, c2, stride, groups, **kw), rng, dtype)
    for bn in b.bn_layers().values():
        randomize_bn(bn, rng)
    for k in (b.w3, b.w1):
        if k.bias is not None:
            k.bias.data = rng.normal(0, 0.3, k.bias.shape).astype(dtype)
    return b


def block_grid():
    """Every setting x groups {1,2} x stride {1,2} x widths {4,8,16} (identity when legal)."""
    out = []
    for variant in ("S0", "S1", "S2", "S3", "S4"):
        for groups in (1, 2):
            for stride in (1, 2):
                for width in (4, 8, 16):
                    out.append((variant, groups, stride, width))
    return out


def dead_channel_block(steps, dead=0, c=4, seed=0, lr=0.05):
    """S1 block trained by SGD on inputs whose channel ``dead`` is identically zero.

    Mimics a dead ReLU feeding the identity branch: that channel's BN running
    variance decays geometrically while its gamma receives no gradient.
    """
    rng = np.random.default_rng(seed)
    b = RepBlock(BlockConfig.for_variant("S1", c, c), rng)
    params = b.named_parameters()
    vel, cfg = {}, OptimConfig(lr0=lr, weight_decay=0.0)
    target = rng.normal(size=(8, c, 6, 6)).astype(np.float32)
    for _ in range(steps):
        x = np.maximum(rng.normal(size=(8, c, 6, 6)), 0).astype(np.float32)
        x[:, dead] = 0.0
        for p in params.values():
            p.grad = None
        out = b.forward(x, train=True)
        loss = mul_const(square_sum(add([out, mul_const(target, -1.0)])), 1.0 / target.size)
        loss.backward()
        sgd_step(params, vel, lr, cfg, {})
    return b
