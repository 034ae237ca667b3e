"""Rank-4 tensor numerics with a small reverse-mode tape.

Only the operations the reparameterizable blocks need are differentiable:
convolution, batch norm, ReLU, elementwise add, pooling / linear head,
cross-entropy and scalar reductions.  Loss-specific primitives live next to
the losses and are built with :func:`make_op`.

Every op preserves the floating dtype of its inputs, so the same code runs in
float32 for training and in float64 for finite-difference checks.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DegenerateBatchError, NumericError

STORAGE_DTYPE = np.float32


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode gradients.

    Leaf tensors created with ``requires_grad=True`` receive ``.grad`` after
    :meth:`backward`; intermediate results only carry their parents and a
    closure mapping the output gradient to parent gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 _parents: tuple = (), _backward: Optional[Callable] = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(STORAGE_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @classmethod
    def param(cls, data, name: Optional[str] = None, dtype=STORAGE_DTYPE) -> "Tensor":
        return cls(np.array(data, dtype=dtype), requires_grad=True, name=name)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ConfigError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)

        # iterative DFS; parent order is fixed so the traversal is deterministic
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable,
            check: str = "") -> Tensor:
    """Wrap an op result; ``backward(g)`` must return one gradient per parent."""
    if check:
        _check_finite(data, check)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def _check_rank4(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ConfigError(f"{what} expects a rank-4 (N, C, H, W) tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class ConvKernel:
    """Grouped convolution weight ``(c2, c1/groups, k, k)`` with optional bias."""

    weight: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        self.weight = as_tensor(self.weight)
        if self.bias is not None:
            self.bias = as_tensor(self.bias)
        w = self.weight.shape
        if len(w) != 4 or w[2] != w[3]:
            raise ConfigError(f"conv weight must be (c2, c1/g, k, k), got {w}")
        if w[2] not in (1, 3):
            raise ConfigError(f"kernel size must be 1 or 3, got {w[2]}")
        if self.groups < 1 or w[0] % self.groups:
            raise ConfigError(f"groups={self.groups} does not divide c2={w[0]}")
        if self.stride < 1 or self.padding < 0:
            raise ConfigError("stride must be positive and padding non-negative")
        if self.bias is not None and self.bias.shape != (w[0],):
            raise ConfigError(f"bias shape {self.bias.shape} does not match c2={w[0]}")

    @property
    def c2(self) -> int:
        return self.weight.shape[0]

    @property
    def c1(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    def parameters(self) -> list[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


@dataclass
class BNParams:
    """Per-channel batch-norm affine parameters and running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        self.gamma = as_tensor(self.gamma)
        self.beta = as_tensor(self.beta)
        self.running_mean = np.asarray(self.running_mean)
        self.running_var = np.asarray(self.running_var)
        c = self.gamma.shape
        if len(c) != 1 or self.beta.shape != c or self.running_mean.shape != c or self.running_var.shape != c:
            raise ConfigError("BN parameters must all be length-c vectors")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if np.any(self.running_var < 0):
            raise ConfigError("running_var must be non-negative")

    @classmethod
    def init(cls, c: int, eps: float = 1e-5, dtype=STORAGE_DTYPE) -> "BNParams":
        return cls(Tensor.param(np.ones(c), dtype=dtype), Tensor.param(np.zeros(c), dtype=dtype),
                   np.zeros(c, dtype=dtype), np.ones(c, dtype=dtype), eps)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def coefficient(self) -> np.ndarray:
        """gamma / sqrt(running_var + eps) in double precision."""
        return self.gamma.data.astype(np.float64) / np.sqrt(self.running_var.astype(np.float64) + self.eps)

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(h: int, k: int, stride: int, padding: int) -> int:
    return (h + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int, groups: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    cg = c // groups
    # (g, n*ho*wo, cg*k*k)
    win = win.reshape(n, groups, cg, ho, wo, k, k).transpose(1, 0, 3, 4, 2, 5, 6)
    return np.ascontiguousarray(win).reshape(groups, n * ho * wo, cg * k * k)


def conv2d(x: Tensor, kernel: ConvKernel) -> Tensor:
    """Cross-correlation of ``x`` with a grouped kernel, zero padding."""
    x = as_tensor(x)
    _check_rank4(x, "conv2d")
    _check_finite(x.data, "conv2d input")
    n, c, h, w = x.shape
    g, k, s, p = kernel.groups, kernel.k, kernel.stride, kernel.padding
    if c != kernel.c1 or c % g:
        raise ConfigError(f"conv2d: input has {c} channels, kernel expects {kernel.c1} (groups={g})")
    ho, wo = conv_output_size(h, k, s, p), conv_output_size(w, k, s, p)
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv2d: input {h}x{w} too small for k={k}, p={p}")

    W = kernel.weight.data
    c2 = W.shape[0]
    og = c2 // g
    dtype = np.result_type(x.data, W)
    xp = np.pad(x.data.astype(dtype, copy=False), ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data.astype(dtype, copy=False)
    cols = _im2col(xp, k, s, ho, wo, g)
    wm = W.astype(dtype, copy=False).reshape(g, og, -1)
    with np.errstate(invalid="ignore", over="ignore"):  # non-finite results are reported by make_op
        out = np.matmul(cols, wm.transpose(0, 2, 1))  # (g, n*ho*wo, og)
    out = out.reshape(g, n, ho, wo, og).transpose(1, 0, 4, 2, 3).reshape(n, c2, ho, wo)
    if kernel.bias is not None:
        out = out + kernel.bias.data.astype(dtype, copy=False)[None, :, None, None]
    out = np.ascontiguousarray(out)

    parents = [x, kernel.weight] + ([kernel.bias] if kernel.bias is not None else [])

    def backward(gout):
        d = gout.reshape(n, g, og, ho, wo).transpose(1, 0, 3, 4, 2).reshape(g, n * ho * wo, og)
        gw = np.matmul(d.transpose(0, 2, 1), cols).reshape(W.shape) if kernel.weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = np.matmul(d, wm).reshape(g, n, ho, wo, c // g, k, k)
            dcols = dcols.transpose(1, 0, 4, 5, 6, 2, 3).reshape(n, c, k, k, ho, wo)
            gxp = np.zeros(xp.shape, dtype=dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[:, :, i, j]
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
            gx = gx.astype(x.dtype, copy=False)
        grads = [gx, None if gw is None else gw.astype(W.dtype, copy=False)]
        if kernel.bias is not None:
            grads.append(gout.sum(axis=(0, 2, 3)).astype(kernel.bias.dtype, copy=False))
        return grads

    return make_op(out, parents, backward, check="conv2d output")


# ---------------------------------------------------------------------------
# batch norm


def batch_norm_train(x: Tensor, bn: BNParams, momentum: float = 0.1) -> Tensor:
    """Normalize with batch statistics and update the running estimates.

    The biased batch variance normalizes; the unbiased one feeds the running
    estimate: ``running <- (1 - momentum) * running + momentum * batch``.
    """
    x = as_tensor(x)
    _check_rank4(x, "batch_norm_train")
    _check_finite(x.data, "batch_norm_train input")
    n, c, h, w = x.shape
    if c != bn.channels:
        raise ConfigError(f"batch_norm_train: {c} channels vs BN of {bn.channels}")
    m = n * h * w
    if m <= 1:
        raise DegenerateBatchError("batch norm needs more than one element per channel")

    x64 = x.data.astype(np.float64)
    mean = x64.mean(axis=(0, 2, 3))
    var = x64.var(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    xhat = (x64 - mean[None, :, None, None]) * inv_std[None, :, None, None]
    gamma = bn.gamma.data.astype(np.float64)
    out = (xhat * gamma[None, :, None, None] + bn.beta.data.astype(np.float64)[None, :, None, None]).astype(x.dtype)

    rdt = bn.running_mean.dtype
    bn.running_mean = ((1 - momentum) * bn.running_mean + momentum * mean).astype(rdt)
    bn.running_var = ((1 - momentum) * bn.running_var + momentum * var * m / (m - 1)).astype(rdt)

    def backward(gout):
        g64 = gout.astype(np.float64)
        sum_g = g64.sum(axis=(0, 2, 3))
        sum_gx = (g64 * xhat).sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gx = (gamma * inv_std / m)[None, :, None, None] * (
                m * g64 - sum_g[None, :, None, None] - xhat * sum_gx[None, :, None, None])
            gx = gx.astype(x.dtype)
        return [gx, sum_gx.astype(bn.gamma.dtype), sum_g.astype(bn.beta.dtype)]

    return make_op(out, [x, bn.gamma, bn.beta], backward, check="batch_norm_train output")


def batch_norm_infer(x: Tensor, bn: BNParams) -> Tensor:
    """``gamma * (x - running_mean) / sqrt(eps + running_var) + beta`` per channel."""
    x = as_tensor(x)
    _check_rank4(x, "batch_norm_infer")
    if x.shape[1] != bn.channels:
        raise ConfigError(f"batch_norm_infer: {x.shape[1]} channels vs BN of {bn.channels}")
    dtype = np.result_type(x.data, bn.gamma.data)
    std = np.sqrt(bn.running_var.astype(dtype) + dtype.type(bn.eps))
    centered = (x.data.astype(dtype, copy=False) - bn.running_mean.astype(dtype)[None, :, None, None]) / std[None, :, None, None]
    out = bn.gamma.data.astype(dtype)[None, :, None, None] * centered + bn.beta.data.astype(dtype)[None, :, None, None]

    def backward(gout):
        gx = (gout * (bn.gamma.data.astype(dtype) / std)[None, :, None, None]).astype(x.dtype, copy=False)
        return [gx, (gout * centered).sum(axis=(0, 2, 3)).astype(bn.gamma.dtype),
                gout.sum(axis=(0, 2, 3)).astype(bn.beta.dtype)]

    return make_op(out, [x, bn.gamma, bn.beta], backward, check="batch_norm_infer output")


# ---------------------------------------------------------------------------
# elementwise, pooling, head, reductions


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return make_op(out, [x], lambda g: [g * mask])


def add(xs: Iterable[Tensor]) -> Tensor:
    """Elementwise sum, accumulated left to right."""
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise ConfigError("add() needs at least one operand")
    shape = xs[0].shape
    for t in xs[1:]:
        if t.shape != shape:
            raise ConfigError(f"add: shape mismatch {t.shape} vs {shape}")
    out = xs[0].data.copy()
    for t in xs[1:]:
        out = out + t.data
    return make_op(out, xs, lambda g: [g.astype(t.dtype, copy=False) for t in xs], check="add output")


def mul_const(x: Tensor, c) -> Tensor:
    """Multiply by a constant (scalar or broadcastable array); ``c`` gets no gradient."""
    x = as_tensor(x)
    c = np.asarray(c)
    out = (x.data * c).astype(x.dtype, copy=False)
    return make_op(out, [x], lambda g: [(g * c).astype(x.dtype, copy=False)])


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    return make_op(out, [x], lambda g: [np.broadcast_to(g, x.shape).astype(x.dtype)])


def square_sum(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.asarray((x.data.astype(np.float64) ** 2).sum(), dtype=x.dtype)
    return make_op(out, [x], lambda g: [(2 * g * x.data).astype(x.dtype)])


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    x = as_tensor(x)
    _check_rank4(x, "global_avg_pool")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    return make_op(out, [x], lambda g: [np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype)])


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with weight of shape (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ConfigError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = [x, weight] + ([bias] if bias is not None else [])

    def backward(g):
        grads = [(g @ weight.data).astype(x.dtype, copy=False), (g.T @ x.data).astype(weight.dtype, copy=False)]
        if bias is not None:
            grads.append(g.sum(axis=0).astype(bias.dtype, copy=False))
        return grads

    return make_op(out, parents, backward, check="linear output")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy; the softmax runs in double precision."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ConfigError("labels must be a length-N vector of class indices")
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return [(p * (float(g) / n)).astype(logits.dtype)]

    return make_op(np.asarray(loss, dtype=logits.dtype), [logits], backward, check="cross-entropy")


# ---------------------------------------------------------------------------
# verification harness


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-3,
               max_checks: Optional[int] = None, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is re-evaluated on perturbed copies of ``params``; all parameters are
    promoted to float64 for the duration of the check and restored afterwards.
    ``max_checks`` caps the number of probed elements per parameter (chosen
    with a seeded generator).
    """
    saved = [p.data for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
            p.grad = None
        out = f()
        if out.data.size != 1 or not np.isfinite(out.data):
            raise NumericError("grad_check: f must return a finite scalar")
        if out.requires_grad:
            out.backward()
        for p in params:
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad.astype(np.float64)
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_checks is not None and flat.size > max_checks:
                idx = np.sort(rng.choice(flat.size, size=max_checks, replace=False))
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError("grad_check: f not finite at perturbed point")
                num = (fp - fm) / (2 * h)
                a = analytic.reshape(-1)[i]
                worst = max(worst, abs(a - num) / (abs(a) + abs(num) + 1e-8))
    finally:
        for p, d in zip(params, saved):
            p.data = d
            p.grad = None
    return worst
