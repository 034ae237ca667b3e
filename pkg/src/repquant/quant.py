"""Uniform INT8 quantization: scales, calibration, fake-quant inference and QAT.

Weights use per-output-channel scales from their max magnitude; the inputs
of every conv and of the linear head use one per-tensor scale.  Symmetric
integers live in ``[-(2**(b-1) - 1), 2**(b-1) - 1]``.
"""
from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Union

import numpy as np

from .data import Dataset
from .errors import ConfigError, NumericError, TrainingDivergedError
from .fusion import DeployNetwork
from .seeding import substream
from .tensor import (ConvKernel, Tensor, as_tensor, conv2d, cross_entropy, global_avg_pool, linear,
                     make_op, relu)

SCALE_FLOOR = 1e-12
HIST_BINS = 2048
MSE_CANDIDATES = 100


@dataclass
class QuantParams:
    """Step size(s) and integer range of a uniform quantizer.

    ``scale`` is a float for per-tensor quantization or a vector for
    per-channel quantization along ``axis``.
    """

    bits: int = 8
    scale: Union[float, np.ndarray] = 1.0
    qmin: int = -127
    qmax: int = 127
    zero_point: int = 0
    axis: Optional[int] = None

    def __post_init__(self):
        s = np.asarray(self.scale, dtype=np.float64)
        if s.ndim == 0:
            self.scale = float(s)
        else:
            self.scale = s
            if self.axis is None:
                self.axis = 0
        if not np.all(s > 0) or not np.all(np.isfinite(s)):
            raise ConfigError("quantizer scale must be positive and finite")
        if self.qmin >= self.qmax:
            raise ConfigError("qmin must be below qmax")

    @classmethod
    def symmetric(cls, scale, bits: int = 8, axis: Optional[int] = None) -> "QuantParams":
        q = 2 ** (bits - 1) - 1
        return cls(bits, scale, -q, q, 0, axis)

    @property
    def per_channel(self) -> bool:
        return np.ndim(self.scale) > 0

    def _bcast(self, ndim: int) -> np.ndarray:
        s = np.asarray(self.scale, dtype=np.float64)
        if s.ndim == 0:
            return s
        shape = [1] * ndim
        shape[self.axis] = s.size
        return s.reshape(shape)

    def to_dict(self) -> dict:
        return dict(bits=self.bits, qmin=self.qmin, qmax=self.qmax, zero_point=self.zero_point, axis=self.axis,
                    scale=np.asarray(self.scale).tolist())

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(d["bits"], d["scale"], d["qmin"], d["qmax"], d.get("zero_point", 0), d.get("axis"))


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def quantize(x, qp: QuantParams) -> np.ndarray:
    """``clip(round(x / scale) + zero_point, qmin, qmax)`` as int32."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    q = round_half_away(x / qp._bcast(x.ndim)) + qp.zero_point
    return np.clip(q, qp.qmin, qp.qmax).astype(np.int32)


def dequantize(q: np.ndarray, qp: QuantParams, dtype=np.float32) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return ((q - qp.zero_point) * qp._bcast(q.ndim)).astype(dtype)


def fake_quant(x, qp: QuantParams) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else np.float32
    return dequantize(quantize(arr, qp), qp, dtype)


def fake_quant_ste(x: Tensor, qp: QuantParams) -> Tensor:
    """Fake quantization whose gradient passes where the value was not clipped."""
    x = as_tensor(x)
    raw = round_half_away(x.data.astype(np.float64) / qp._bcast(x.ndim)) + qp.zero_point
    inside = (raw >= qp.qmin) & (raw <= qp.qmax)
    out = dequantize(np.clip(raw, qp.qmin, qp.qmax), qp, x.dtype)
    return make_op(out, [x], lambda g: [g * inside])


# ---------------------------------------------------------------------------
# calibration statistics


def _pow2_bound(a: float) -> float:
    """Smallest power of two strictly above ``a`` (at least 2**-20)."""
    if a <= 0 or not math.isfinite(a):
        return 2.0 ** -20
    _, e = math.frexp(a)  # a = m * 2**e with 0.5 <= m < 1, so a < 2**e
    return max(2.0 ** e, 2.0 ** -20)


@dataclass
class CalibStats:
    """Running min/max (scalars, or vectors for per-channel stats) plus an optional histogram.

    The histogram spans ``[-bound, bound]`` with ``bound`` a power of two, so
    merging two histograms only ever sums whole groups of bins: merge order
    never changes the result.
    """

    min: Union[float, np.ndarray] = math.inf
    max: Union[float, np.ndarray] = -math.inf
    count: int = 0
    bound: float = 0.0
    hist: Optional[np.ndarray] = None

    @classmethod
    def from_array(cls, x, histogram: bool = True, axis: Optional[int] = None) -> "CalibStats":
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        if x.size == 0:
            return cls()
        if not np.all(np.isfinite(x)):
            raise NumericError("calibration data contains non-finite values")
        if axis is not None:
            red = tuple(i for i in range(x.ndim) if i != axis)
            return cls(x.min(axis=red), x.max(axis=red), x.size)
        lo, hi = float(x.min()), float(x.max())
        st = cls(lo, hi, x.size)
        if histogram:
            st.bound = _pow2_bound(max(abs(lo), abs(hi)))
            st.hist = np.bincount(cls._bin_index(x.ravel(), st.bound), minlength=HIST_BINS).astype(np.int64)
        return st

    @staticmethod
    def _bin_index(v: np.ndarray, bound: float) -> np.ndarray:
        idx = np.floor(v * (HIST_BINS // 2) / bound).astype(np.int64) + HIST_BINS // 2
        return np.clip(idx, 0, HIST_BINS - 1)

    def _rebinned(self, bound: float) -> np.ndarray:
        if self.hist is None:
            return np.zeros(HIST_BINS, np.int64)
        factor = int(round(bound / self.bound))
        if factor == 1:
            return self.hist.copy()
        src = np.arange(HIST_BINS) - HIST_BINS // 2
        dst = np.floor_divide(src, factor) + HIST_BINS // 2
        return np.bincount(dst, weights=self.hist, minlength=HIST_BINS).astype(np.int64)

    def merge(self, other: "CalibStats") -> "CalibStats":
        if self.count == 0:
            return other.copy()
        if other.count == 0:
            return self.copy()
        out = CalibStats(np.minimum(self.min, other.min), np.maximum(self.max, other.max),
                         self.count + other.count)
        if np.ndim(out.min) == 0:
            out.min, out.max = float(out.min), float(out.max)
        if self.hist is not None and other.hist is not None:
            out.bound = max(self.bound, other.bound)
            out.hist = self._rebinned(out.bound) + other._rebinned(out.bound)
        return out

    def copy(self) -> "CalibStats":
        return CalibStats(np.copy(self.min) if np.ndim(self.min) else self.min,
                          np.copy(self.max) if np.ndim(self.max) else self.max,
                          self.count, self.bound, None if self.hist is None else self.hist.copy())

    @property
    def amax(self):
        return np.maximum(np.abs(self.min), np.abs(self.max))

    def bin_centers(self) -> np.ndarray:
        width = 2 * self.bound / HIST_BINS
        return -self.bound + (np.arange(HIST_BINS) + 0.5) * width


def compute_scale(stats: CalibStats, bits: int = 8, symmetric: bool = True,
                  axis: Optional[int] = None) -> QuantParams:
    """Step size from an observed range: ``(x_max - x_min) / (2**bits - 1)``.

    In symmetric mode the range is ``[-a, a]`` with ``a = max(|min|, |max|)``.
    """
    if stats.count == 0:
        raise ConfigError("no values observed")
    if symmetric:
        a = np.asarray(stats.amax, dtype=np.float64)
        scale = 2.0 * a / (2 ** bits - 1)
        zp, qmin, qmax = 0, -(2 ** (bits - 1) - 1), 2 ** (bits - 1) - 1
    else:
        lo = np.minimum(np.asarray(stats.min, dtype=np.float64), 0.0)
        hi = np.maximum(np.asarray(stats.max, dtype=np.float64), 0.0)
        scale = (hi - lo) / (2 ** bits - 1)
        qmin, qmax = 0, 2 ** bits - 1
        zp = 0
    if np.any(scale < SCALE_FLOOR):
        warnings.warn(f"all-zero range; scale floored at {SCALE_FLOOR:g}", RuntimeWarning, stacklevel=2)
        scale = np.maximum(scale, SCALE_FLOOR)
    if not symmetric:
        if np.ndim(scale):
            raise ConfigError("asymmetric per-channel quantization is not supported")
        zp = int(round_half_away(-float(lo) / float(scale)))
    if np.ndim(scale) and axis is None:
        axis = 0
    return QuantParams(bits, scale, qmin, qmax, zp, axis)


def mse_scale(stats: CalibStats, bits: int = 8, candidates: int = MSE_CANDIDATES) -> QuantParams:
    """Symmetric scale minimizing the histogram-weighted fake-quant MSE.

    Clip ranges ``a'`` are searched over ``candidates`` evenly spaced points of
    ``[0.2 a, a]``.
    """
    if stats.hist is None:
        raise ConfigError("mse calibration needs a histogram")
    a = float(stats.amax)
    if a <= 0:
        return compute_scale(stats, bits)
    centers = stats.bin_centers()
    w = stats.hist.astype(np.float64)
    nz = w > 0
    centers, w = centers[nz], w[nz]
    best, best_err = a, math.inf
    for clip in np.linspace(0.2 * a, a, candidates):
        qp = QuantParams.symmetric(2.0 * clip / (2 ** bits - 1), bits)
        err = float((w * (centers - dequantize(quantize(centers, qp), qp, np.float64)) ** 2).sum())
        if err < best_err:
            best, best_err = clip, err
    return QuantParams.symmetric(2.0 * best / (2 ** bits - 1), bits)


def weight_scale(weight: np.ndarray, bits: int = 8) -> QuantParams:
    """Per-output-channel max calibration along axis 0."""
    return compute_scale(CalibStats.from_array(weight, axis=0), bits, axis=0)


# ---------------------------------------------------------------------------
# network-level plans


@dataclass
class LayerQuant:
    weight: QuantParams
    act: QuantParams
    act_amax: float = 0.0


@dataclass
class QuantPlan:
    """Quantizers for every layer of a deploy network, in forward order."""

    layers: dict = field(default_factory=dict)
    method: str = "max"
    bits: int = 8

    def to_dict(self) -> dict:
        return dict(method=self.method, bits=self.bits,
                    layers={k: dict(weight=v.weight.to_dict(), act=v.act.to_dict(), act_amax=v.act_amax)
                            for k, v in self.layers.items()})

    @classmethod
    def from_dict(cls, d: dict) -> "QuantPlan":
        layers = {k: LayerQuant(QuantParams.from_dict(v["weight"]), QuantParams.from_dict(v["act"]),
                                float(v.get("act_amax", 0.0))) for k, v in d["layers"].items()}
        return cls(layers, d.get("method", "max"), int(d.get("bits", 8)))

    def to_json(self, path: str) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)

    @classmethod
    def from_json(cls, path: str) -> "QuantPlan":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


Hook = Callable[[str, Tensor, Tensor], tuple]


def forward_with(net: DeployNetwork, x, hook: Optional[Hook] = None) -> Tensor:
    """Deploy forward where ``hook(name, input, weight)`` may replace each layer's input and weight."""
    if not getattr(net, "deploy", False):
        raise ConfigError("quantized inference runs on a fused (deploy) network")
    h = as_tensor(x)
    for i, f in enumerate(net.convs):
        w = f.weight
        if hook is not None:
            h, w = hook(f"convs.{i}", h, w)
        h = relu(conv2d(h, ConvKernel(w, f.bias, f.stride, f.padding, f.groups)))
    pooled = global_avg_pool(h)
    w = net.head_weight
    if hook is not None:
        pooled, w = hook("head", pooled, w)
    return linear(pooled, w, net.head_bias)


def _batches(batches) -> list[np.ndarray]:
    if isinstance(batches, Dataset):
        return [x for x, _ in batches.batches(256)]
    if isinstance(batches, np.ndarray):
        return [batches]
    return [b[0] if isinstance(b, tuple) else b for b in batches]


def calibrate(net: DeployNetwork, batches, method: str = "max", bits: int = 8) -> QuantPlan:
    """Weights: per-channel max.  Layer inputs: per-tensor ``max`` or ``mse``."""
    if method not in ("max", "mse"):
        raise ConfigError(f"unknown calibration method {method!r}")
    xs = _batches(batches)
    if not xs:
        raise ConfigError("calibration set is empty")
    stats: dict[str, CalibStats] = {}

    def observe(name, inp, w):
        s = CalibStats.from_array(inp.data)
        stats[name] = stats[name].merge(s) if name in stats else s
        return inp, w

    for x in xs:
        forward_with(net, x, observe)
    weights = {f"convs.{i}": f.weight.data for i, f in enumerate(net.convs)}
    weights["head"] = net.head_weight.data
    plan = QuantPlan(method=method, bits=bits)
    for name in net.layer_names():
        st = stats[name]
        act = compute_scale(st, bits) if method == "max" else mse_scale(st, bits)
        plan.layers[name] = LayerQuant(weight_scale(weights[name], bits), act, float(st.amax))
    return plan


def _quant_hook(plan: QuantPlan, layers: Optional[set], quantize_weights: bool, quantize_acts: bool,
                ste: bool = False, dynamic_weights: bool = False) -> Hook:
    fq = fake_quant_ste if ste else (lambda t, qp: Tensor(fake_quant(t, qp)))

    def hook(name, inp, w):
        if layers is not None and name not in layers:
            return inp, w
        if name not in plan.layers:
            raise ConfigError(f"no quantization parameters for layer {name}")
        lq = plan.layers[name]
        if quantize_acts:
            inp = fq(inp, lq.act)
        if quantize_weights:
            wq = weight_scale(w.data, plan.bits) if dynamic_weights else lq.weight
            w = fq(w, wq)
        return inp, w

    return hook


def quantized_forward(net: DeployNetwork, plan: QuantPlan, x, layers: Optional[Iterable[str]] = None,
                      quantize_weights: bool = True, quantize_acts: bool = True) -> Tensor:
    """Simulated INT8 inference: fake-quantized weights and layer inputs, float biases.

    ``layers`` restricts quantization to the named layers (default: all).
    """
    sel = None if layers is None else set(layers)
    return forward_with(net, x, _quant_hook(plan, sel, quantize_weights, quantize_acts))


def quantized_accuracy(net: DeployNetwork, plan: QuantPlan, dataset: Dataset, batch_size: int = 256) -> float:
    correct = 0
    for x, y in dataset.batches(batch_size):
        correct += int((quantized_forward(net, plan, x).data.argmax(axis=1) == y).sum())
    return correct / len(dataset)


def qat_finetune(net: DeployNetwork, data: Dataset, cfg, plan: QuantPlan) -> tuple[DeployNetwork, QuantPlan]:
    """Fine-tune a fused network with fake quantization in the forward pass.

    Activation scales stay at their calibrated values; weight scales follow the
    current weights (per-channel max).  Gradients use the straight-through
    estimator.  Returns the tuned copy and its refreshed plan.
    """
    from .training import cosine_lr, sgd_step

    if not getattr(net, "deploy", False):
        raise ConfigError("QAT is applied to the fused (deploy) network")
    tuned = net.copy()
    params = tuned.named_parameters()
    mask = {k: k.endswith(".weight") for k in params}
    velocity: dict = {}
    rng = substream(cfg.seed, "qat-shuffle")
    bs = min(cfg.batch_size, len(data))
    total = cfg.epochs * (len(data) // bs)
    hook = _quant_hook(plan, None, True, True, ste=True, dynamic_weights=True)
    step = 0
    for epoch in range(cfg.epochs):
        for x, y in data.batches(bs, rng, drop_last=True):
            for p in params.values():
                p.grad = None
            try:
                loss = cross_entropy(forward_with(tuned, x, hook), y)
            except NumericError as e:
                raise TrainingDivergedError(f"QAT epoch {epoch + 1}: {e}") from e
            loss.backward()
            sgd_step(params, velocity, cosine_lr(step, total, cfg.lr0), cfg, mask)
            for k, p in params.items():
                if not np.all(np.isfinite(p.data)):
                    raise TrainingDivergedError(f"QAT epoch {epoch + 1}: {k} became non-finite")
            step += 1
    new_plan = QuantPlan({k: LayerQuant(weight_scale((tuned.head_weight if k == "head" else
                                                       tuned.convs[int(k.split('.')[1])].weight).data, plan.bits),
                                        v.act, v.act_amax) for k, v in plan.layers.items()},
                         plan.method, plan.bits)
    return tuned, new_plan
