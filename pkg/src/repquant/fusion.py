"""Exact collapse of a multi-branch block into one 3x3 convolution.

Per branch the BN affine map is folded into the conv, the 1x1 and identity
kernels are lifted to 3x3 by centring, everything is summed, and a post-sum
BN (if any) is folded into the summed kernel.  All algebra runs in float64
and is cast back to the storage dtype at the end.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import Network, NetworkSpec, RepBlock
from .errors import ConfigError, FusionIntegrityError
from .seeding import substream
from .tensor import (BNParams, ConvKernel, Tensor, as_tensor, conv2d, global_avg_pool, linear,
                     make_op, relu)

PROBE_SEED = 0
PROBE_SHAPE_HW = (8, 8)
PROBE_BATCH = 4


@dataclass
class FusedConv(ConvKernel):
    """Deploy-form 3x3 kernel with bias; padding is always 1."""

    padding: int = 1

    def __post_init__(self):
        super().__post_init__()
        if self.k != 3 or self.padding != 1 or self.bias is None:
            raise ConfigError("a fused conv is a padded 3x3 kernel with bias")


def _fold(weight: np.ndarray, bias: np.ndarray, bn: BNParams) -> tuple[np.ndarray, np.ndarray]:
    t = bn.coefficient()
    w = weight * t[:, None, None, None]
    b = bn.beta.data.astype(np.float64) + (bias - bn.running_mean.astype(np.float64)) * t
    return w, b


def fold_bn(k: ConvKernel, bn: BNParams) -> ConvKernel:
    """Absorb ``bn`` (running statistics) into the preceding convolution."""
    if bn.channels != k.c2:
        raise ConfigError(f"BN has {bn.channels} channels, conv outputs {k.c2}")
    bias = np.zeros(k.c2) if k.bias is None else k.bias.data.astype(np.float64)
    w, b = _fold(k.weight.data.astype(np.float64), bias, bn)
    dt = k.weight.dtype
    return ConvKernel(Tensor(w.astype(dt)), Tensor(b.astype(dt)), k.stride, k.padding, k.groups)


def pad_1x1_to_3x3(k1: ConvKernel) -> ConvKernel:
    if k1.k != 1:
        raise ConfigError(f"expected a 1x1 kernel, got {k1.k}x{k1.k}")
    w = np.pad(k1.weight.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return ConvKernel(Tensor(w), k1.bias, k1.stride, k1.padding + 1, k1.groups)


def _identity_weight(c: int, groups: int) -> np.ndarray:
    if groups < 1 or c % groups:
        raise ConfigError(f"groups={groups} must divide channels={c}")
    per = c // groups
    w = np.zeros((c, per, 3, 3))
    w[np.arange(c), np.arange(c) % per, 1, 1] = 1.0
    return w


def identity_kernel(c: int, groups: int = 1, dtype=np.float32) -> ConvKernel:
    return ConvKernel(Tensor(_identity_weight(c, groups).astype(dtype)), None, 1, 1, groups)


def fused_arrays(b: RepBlock) -> tuple[np.ndarray, np.ndarray]:
    """Float64 fused (weight, bias) of an eval-mode block."""
    c = b.config
    zero = np.zeros(c.c2)

    w3 = b.w3.weight.data.astype(np.float64)
    b3 = zero if b.w3.bias is None else b.w3.bias.data.astype(np.float64)
    if b.bn3 is not None:
        w3, b3 = _fold(w3, b3, b.bn3)

    w1 = b.w1.weight.data.astype(np.float64)
    b1 = zero if b.w1.bias is None else b.w1.bias.data.astype(np.float64)
    if b.bn1 is not None:
        w1, b1 = _fold(w1, b1, b.bn1)
    w1 = np.pad(w1, ((0, 0), (0, 0), (1, 1), (1, 1)))

    weight, bias = w3 + w1, b3 + b1
    if c.identity_enabled:
        w0, b0 = _identity_weight(c.c1, c.groups), zero
        if b.bn0 is not None:
            w0, b0 = _fold(w0, b0, b.bn0)
        weight, bias = weight + w0, bias + b0
    if b.bn_post is not None:
        weight, bias = _fold(weight, bias, b.bn_post)
    return weight, bias


def block_forward_deploy(f: ConvKernel, x) -> Tensor:
    return relu(conv2d(x, f))


def probe_batch(c1: int, dtype=np.float32) -> np.ndarray:
    rng = substream(PROBE_SEED, "fusion-probe")
    return rng.uniform(-1, 1, (PROBE_BATCH, c1) + PROBE_SHAPE_HW).astype(dtype)


def fusion_residual(b: RepBlock, f: ConvKernel, x: np.ndarray) -> float:
    ref = b.forward(x, train=False).data
    dep = block_forward_deploy(f, x).data
    return float(np.max(np.abs(ref.astype(np.float64) - dep)))


def fuse_block(b: RepBlock, check: bool = True, tol: float = 1e-4) -> FusedConv:
    """Fuse an eval-mode block; the result is verified on a fixed probe batch.

    The probe tolerance is ``tol`` absolute, scaled up by the output magnitude
    when outputs exceed 1 so blocks with huge fold coefficients are judged at
    float32 resolution.
    """
    if isinstance(b, ConvKernel):
        raise ConfigError("block is already fused; fusion is one-way")
    if not isinstance(b, RepBlock):
        raise ConfigError(f"cannot fuse {type(b).__name__}")
    weight, bias = fused_arrays(b)
    dt = b.w3.weight.dtype
    f = FusedConv(Tensor.param(weight, dtype=dt), Tensor.param(bias, dtype=dt),
                  stride=b.config.stride, padding=1, groups=b.config.groups)
    if check:
        x = probe_batch(b.config.c1, dt)
        ref_scale = float(np.max(np.abs(b.forward(x, train=False).data)))
        resid = fusion_residual(b, f, x)
        if not resid <= tol * max(1.0, ref_scale):
            raise FusionIntegrityError(f"{b.name}: deploy/train residual {resid:.3e} exceeds {tol:g}")
    return f


def equivalent_kernel(b: RepBlock) -> Tensor:
    """Differentiable centre-tap equivalent kernel ``K3c * t3 + K1 * t1``.

    ``t = gamma / sqrt(running_var + eps)`` is taken as a constant (no gradient
    flows into BN parameters or statistics).
    """
    if b.bn3 is None or b.bn1 is None:
        raise ConfigError(f"{b.name}: equivalent kernel needs BN on both the 3x3 and 1x1 branches")
    k3, k1 = b.w3.weight, b.w1.weight
    dt = k3.dtype
    t3 = b.bn3.coefficient().astype(dt)[:, None, None, None]
    t1 = b.bn1.coefficient().astype(dt)[:, None, None, None]
    out = k3.data[:, :, 1:2, 1:2] * t3 + k1.data * t1

    def backward(g):
        g3 = np.zeros_like(k3.data)
        g3[:, :, 1:2, 1:2] = g * t3
        return [g3, (g * t1).astype(k1.dtype)]

    return make_op(out, [k3, k1], backward)


class DeployNetwork:
    """Single-branch network: fused 3x3 convs, average pool, linear head."""

    deploy = True

    def __init__(self, spec: NetworkSpec, convs: list[FusedConv], head_weight: Tensor, head_bias: Tensor):
        self.spec = spec
        self.convs = convs
        self.head_weight = as_tensor(head_weight)
        self.head_bias = as_tensor(head_bias)

    def forward(self, x) -> Tensor:
        h = as_tensor(x)
        for f in self.convs:
            h = relu(conv2d(h, f))
        return linear(global_avg_pool(h), self.head_weight, self.head_bias)

    __call__ = forward

    def layer_names(self) -> list[str]:
        """Forward order of quantizable layers: every fused conv, then the head."""
        return [f"convs.{i}" for i in range(len(self.convs))] + ["head"]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, f in enumerate(self.convs):
            out[f"convs.{i}.weight"] = f.weight
            out[f"convs.{i}.bias"] = f.bias
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.named_parameters().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(arrays) != set(params):
            raise ConfigError(f"deploy state mismatch: {sorted(set(arrays) ^ set(params))}")
        for k, t in params.items():
            if arrays[k].shape != t.shape:
                raise ConfigError(f"{k}: shape {arrays[k].shape} != {t.shape}")
            t.data = np.array(arrays[k])

    def copy(self) -> "DeployNetwork":
        convs = [FusedConv(Tensor.param(f.weight.data.copy(), dtype=f.weight.dtype),
                           Tensor.param(f.bias.data.copy(), dtype=f.bias.dtype),
                           stride=f.stride, padding=1, groups=f.groups) for f in self.convs]
        return DeployNetwork(self.spec, convs,
                             Tensor.param(self.head_weight.data.copy(), dtype=self.head_weight.dtype),
                             Tensor.param(self.head_bias.data.copy(), dtype=self.head_bias.dtype))

    @classmethod
    def empty(cls, spec: NetworkSpec, dtype=np.float32) -> "DeployNetwork":
        """Zero-initialised deploy network with the layout implied by ``spec``."""
        convs = []
        for cfg in spec.block_configs():
            convs.append(FusedConv(Tensor.param(np.zeros((cfg.c2, cfg.c1 // cfg.groups, 3, 3)), dtype=dtype),
                                   Tensor.param(np.zeros(cfg.c2), dtype=dtype),
                                   stride=cfg.stride, padding=1, groups=cfg.groups))
        c = spec.widths[-1]
        return cls(spec, convs, Tensor.param(np.zeros((spec.num_classes, c)), dtype=dtype),
                   Tensor.param(np.zeros(spec.num_classes), dtype=dtype))


def to_deploy(net: Network, check: bool = True) -> DeployNetwork:
    """Fuse every block of a train-form network (the input is left untouched)."""
    if getattr(net, "deploy", False):
        raise ConfigError("network is already in deploy form; fusion is one-way")
    convs = [fuse_block(b, check=check) for b in net.blocks]
    return DeployNetwork(net.spec, convs,
                         Tensor.param(net.head_weight.data.copy(), dtype=net.head_weight.dtype),
                         Tensor.param(net.head_bias.data.copy(), dtype=net.head_bias.dtype))


def fold_coefficients(b: RepBlock) -> dict[str, np.ndarray]:
    """Per-branch ``gamma / sqrt(eps + var)`` for every BN present in the block."""
    return {key: bn.coefficient() for key, bn in b.bn_layers().items()}
