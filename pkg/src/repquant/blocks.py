"""Train-time multi-branch blocks and the small classifier built from them.

A block sums a 3x3 conv branch, a 1x1 conv branch and (when shapes allow) an
identity branch, each optionally followed by batch norm, then optionally
applies a post-addition batch norm and finally ReLU.  The named variants:

====  =====================================================  ==============
name  branch layout                                          regularizer
====  =====================================================  ==============
S0    BN on 3x3, 1x1 and identity                            custom L2
S1    same layout as S0                                      plain L2
S2    S1 without the identity BN                             plain L2
S3    S2 without the 1x1 BN                                  plain L2
S4    S3 plus a BN after the branch sum                      plain L2
====  =====================================================  ==============

``M2``/``M3``/``M4`` flags toggle the individual structural changes so the
single-modification ablations can be expressed too.
"""
from __future__ import annotations

import enum
import re
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, NumericError
from .seeding import substream
from .tensor import (STORAGE_DTYPE, BNParams, ConvKernel, Tensor, add, as_tensor,
                     batch_norm_infer, batch_norm_train, conv2d, global_avg_pool, linear, relu)


class LossMode(str, enum.Enum):
    CUSTOM_L2 = "custom_l2"
    EQ5_NO_DENOMINATOR = "eq5_no_denominator"
    PLAIN_L2 = "plain_l2"


@dataclass(frozen=True)
class BlockConfig:
    c1: int
    c2: int
    stride: int = 1
    groups: int = 1
    bn_on_3x3: bool = True
    bn_on_1x1: bool = True
    bn_on_identity: bool = True
    post_bn: bool = False
    identity_enabled: bool = True
    bias_on_unnormalized_branches: bool = False
    bn_1x1_affine: bool = True

    def __post_init__(self):
        if self.c1 < 1 or self.c2 < 1:
            raise ConfigError("channel counts must be positive")
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")
        if self.groups < 1 or self.c1 % self.groups or self.c2 % self.groups:
            raise ConfigError(f"groups={self.groups} must divide c1={self.c1} and c2={self.c2}")
        if self.identity_enabled and (self.c1 != self.c2 or self.stride != 1):
            raise ConfigError("identity branch requires c1 == c2 and stride == 1")
        has_branch_bn = self.bn_on_3x3 or self.bn_on_1x1 or (self.identity_enabled and self.bn_on_identity)
        if not (has_branch_bn or self.post_bn):
            raise ConfigError("at least one branch must carry BN, or post_bn must be on")

    @classmethod
    def for_variant(cls, variant: str, c1: int, c2: int, stride: int = 1, groups: int = 1,
                    **overrides) -> "BlockConfig":
        """Build a config from ``S0``..``S4`` or a ``+``-joined flag list like ``M2+M4``."""
        layout = variant_layout(variant)
        identity = c1 == c2 and stride == 1
        return cls(c1=c1, c2=c2, stride=stride, groups=groups, identity_enabled=identity,
                   **{**layout, **overrides})

    @property
    def has_identity(self) -> bool:
        return self.identity_enabled


_SETTINGS = {
    "S0": ((), LossMode.CUSTOM_L2),
    "S1": ((), LossMode.PLAIN_L2),
    "S2": (("M2",), LossMode.PLAIN_L2),
    "S3": (("M2", "M3"), LossMode.PLAIN_L2),
    "S4": (("M2", "M3", "M4"), LossMode.PLAIN_L2),
}


def _flags(variant: str) -> tuple[str, ...]:
    v = variant.strip().upper()
    if v in _SETTINGS:
        return _SETTINGS[v][0]
    if v in ("", "NONE", "RAW"):
        return ()
    flags = tuple(f.strip() for f in v.split("+"))
    for f in flags:
        if not re.fullmatch(r"M[1-4]", f):
            raise ConfigError(f"unknown block variant {variant!r}")
    return flags


def variant_layout(variant: str) -> dict:
    flags = _flags(variant)
    return dict(bn_on_identity="M2" not in flags, bn_on_1x1="M3" not in flags, post_bn="M4" in flags)


def default_loss_mode(variant: str) -> LossMode:
    v = variant.strip().upper()
    if v in _SETTINGS:
        return _SETTINGS[v][1]
    return LossMode.PLAIN_L2 if "M1" in _flags(v) else LossMode.CUSTOM_L2


def kaiming_normal(rng: np.random.Generator, shape: tuple, fan_in: int, dtype=STORAGE_DTYPE) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class RepBlock:
    """Multi-branch block; see the module docstring for the branch layouts."""

    def __init__(self, config: BlockConfig, rng: Optional[np.random.Generator] = None,
                 dtype=STORAGE_DTYPE, name: str = "block"):
        self.config = config
        self.name = name
        rng = rng if rng is not None else np.random.default_rng(0)
        c = config
        cg = c.c1 // c.groups

        def maybe_bias(has_bn: bool) -> Optional[Tensor]:
            if has_bn or not c.bias_on_unnormalized_branches:
                return None
            return Tensor.param(np.zeros(c.c2), dtype=dtype)

        self.w3 = ConvKernel(Tensor.param(kaiming_normal(rng, (c.c2, cg, 3, 3), cg * 9, dtype), dtype=dtype),
                             maybe_bias(c.bn_on_3x3), stride=c.stride, padding=1, groups=c.groups)
        self.w1 = ConvKernel(Tensor.param(kaiming_normal(rng, (c.c2, cg, 1, 1), cg, dtype), dtype=dtype),
                             maybe_bias(c.bn_on_1x1), stride=c.stride, padding=0, groups=c.groups)
        self.bn3 = BNParams.init(c.c2, dtype=dtype) if c.bn_on_3x3 else None
        self.bn1 = BNParams.init(c.c2, dtype=dtype) if c.bn_on_1x1 else None
        if self.bn1 is not None and not c.bn_1x1_affine:
            self.bn1.gamma.requires_grad = False
            self.bn1.beta.requires_grad = False
        self.bn0 = BNParams.init(c.c1, dtype=dtype) if c.identity_enabled and c.bn_on_identity else None
        self.bn_post = BNParams.init(c.c2, dtype=dtype) if c.post_bn else None

    # -- structure ---------------------------------------------------------
    def bn_layers(self) -> dict[str, BNParams]:
        out = {}
        for key in ("bn3", "bn1", "bn0", "bn_post"):
            bn = getattr(self, key)
            if bn is not None:
                out[key] = bn
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"w3.weight": self.w3.weight}
        if self.w3.bias is not None:
            out["w3.bias"] = self.w3.bias
        out["w1.weight"] = self.w1.weight
        if self.w1.bias is not None:
            out["w1.bias"] = self.w1.bias
        for key, bn in self.bn_layers().items():
            if bn.gamma.requires_grad:
                out[f"{key}.gamma"] = bn.gamma
                out[f"{key}.beta"] = bn.beta
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for key, bn in self.bn_layers().items():
            if not bn.gamma.requires_grad:
                out[f"{key}.gamma"] = bn.gamma.data
                out[f"{key}.beta"] = bn.beta.data
            out[f"{key}.running_mean"] = bn.running_mean
            out[f"{key}.running_var"] = bn.running_var
        return out

    # -- forward -----------------------------------------------------------
    def _bn(self, x: Tensor, bn: BNParams, train: bool, momentum: float) -> Tensor:
        return batch_norm_train(x, bn, momentum) if train else batch_norm_infer(x, bn)

    def branch_outputs(self, x, train: bool = False, momentum: float = 0.1) -> dict[str, Tensor]:
        """Per-branch outputs keyed ``3x3``, ``1x1``, ``identity`` (when present)."""
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.config.c1:
            raise ConfigError(f"{self.name}: expected (N, {self.config.c1}, H, W) input, got {x.shape}")
        out = {}
        for branch, kernel, bn in (("3x3", self.w3, self.bn3), ("1x1", self.w1, self.bn1)):
            try:
                y = conv2d(x, kernel)
                out[branch] = self._bn(y, bn, train, momentum) if bn is not None else y
            except NumericError as e:
                raise NumericError(f"{self.name}/{branch}: {e}") from e
        if self.config.identity_enabled:
            try:
                out["identity"] = self._bn(x, self.bn0, train, momentum) if self.bn0 is not None else x
            except NumericError as e:
                raise NumericError(f"{self.name}/identity: {e}") from e
        return out

    def preactivation(self, x, train: bool = False, momentum: float = 0.1) -> Tensor:
        s = add(self.branch_outputs(x, train, momentum).values())
        if self.bn_post is not None:
            try:
                s = self._bn(s, self.bn_post, train, momentum)
            except NumericError as e:
                raise NumericError(f"{self.name}/post_bn: {e}") from e
        return s

    def forward(self, x, train: bool = False, momentum: float = 0.1) -> Tensor:
        return relu(self.preactivation(x, train, momentum))

    __call__ = forward


def block_forward_train(block: RepBlock, x, mode: str = "eval", momentum: float = 0.1) -> Tensor:
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    return block.forward(x, train=mode == "train", momentum=momentum)


# ---------------------------------------------------------------------------
# network


@dataclass
class NetworkSpec:
    """Scaled-down A-series topology: one stride-2 block opens every stage.

    ``groups`` is applied to blocks with an odd global index, mirroring the
    alternating grouped layers of the g2/g4 variants.
    """

    widths: tuple = (8, 16, 32, 64)
    blocks: tuple = (1, 2, 2, 1)
    in_channels: int = 3
    num_classes: int = 10
    variant: str = "S4"
    groups: int = 1
    bias_on_unnormalized_branches: bool = False

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.blocks = tuple(int(b) for b in self.blocks)
        if not self.widths or len(self.widths) != len(self.blocks):
            raise ConfigError("widths and blocks must be non-empty and of equal length")
        if any(w < 1 for w in self.widths):
            raise ConfigError("stage widths must be positive")
        if any(b < 1 for b in self.blocks):
            raise ConfigError("every stage needs at least one block")
        if self.num_classes < 2 or self.in_channels < 1:
            raise ConfigError("need >= 2 classes and >= 1 input channel")
        variant_layout(self.variant)

    @classmethod
    def a0_mini(cls, **kw) -> "NetworkSpec":
        return cls(**{"widths": (8, 16, 32, 64), "blocks": (1, 2, 2, 1), **kw})

    def block_configs(self) -> list[BlockConfig]:
        configs = []
        c_in = self.in_channels
        idx = 0
        for width, count in zip(self.widths, self.blocks):
            for j in range(count):
                stride = 2 if j == 0 else 1
                g = self.groups if idx % 2 == 1 else 1
                if c_in % g or width % g:
                    g = 1
                configs.append(BlockConfig.for_variant(
                    self.variant, c_in, width, stride=stride, groups=g,
                    bias_on_unnormalized_branches=self.bias_on_unnormalized_branches))
                c_in = width
                idx += 1
        return configs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"], d["blocks"] = list(self.widths), list(self.blocks)
        return d


class Network:
    """Sequence of :class:`RepBlock` + global average pool + linear head."""

    deploy = False

    def __init__(self, spec: NetworkSpec, seed: int = 0, dtype=STORAGE_DTYPE):
        self.spec = spec
        self.seed = seed
        rng = substream(seed, "init")
        self.blocks = [RepBlock(cfg, rng, dtype, name=f"blocks.{i}") for i, cfg in enumerate(spec.block_configs())]
        c = spec.widths[-1]
        bound = 1.0 / np.sqrt(c)
        self.head_weight = Tensor.param(rng.uniform(-bound, bound, (spec.num_classes, c)), dtype=dtype)
        self.head_bias = Tensor.param(np.zeros(spec.num_classes), dtype=dtype)

    def forward(self, x, train: bool = False, momentum: float = 0.1) -> Tensor:
        h = as_tensor(x)
        for b in self.blocks:
            h = b.forward(h, train, momentum)
        return linear(global_avg_pool(h), self.head_weight, self.head_bias)

    __call__ = forward

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for b in self.blocks:
            for k, t in b.named_parameters().items():
                out[f"{b.name}.{k}"] = t
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every array needed to reproduce the network: parameters then BN buffers."""
        out = {k: t.data for k, t in self.named_parameters().items()}
        for b in self.blocks:
            for k, arr in b.named_buffers().items():
                out[f"{b.name}.{k}"] = arr
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        expected = set(self.state_arrays())
        if set(arrays) != expected:
            missing, extra = expected - set(arrays), set(arrays) - expected
            raise ConfigError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for b in self.blocks:
            for key, bn in b.bn_layers().items():
                prefix = f"{b.name}.{key}"
                bn.running_mean = np.array(arrays[f"{prefix}.running_mean"])
                bn.running_var = np.array(arrays[f"{prefix}.running_var"])
                if not bn.gamma.requires_grad:
                    bn.gamma.data = np.array(arrays[f"{prefix}.gamma"])
                    bn.beta.data = np.array(arrays[f"{prefix}.beta"])
        for k, t in params.items():
            if arrays[k].shape != t.shape:
                raise ConfigError(f"{k}: shape {arrays[k].shape} != {t.shape}")
            t.data = np.array(arrays[k])

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.parameters())


def build_network(spec: NetworkSpec, seed: int = 0, dtype=STORAGE_DTYPE) -> Network:
    return Network(spec, seed, dtype)
