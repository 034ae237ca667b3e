"""Regularizers, SGD with a per-parameter decay mask, cosine schedule and the training loop."""
from __future__ import annotations

import copy
import csv
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .blocks import LossMode, Network, RepBlock
from .data import Dataset
from .errors import ConfigError, NumericError, TrainingDivergedError
from .seeding import substream
from .tensor import Tensor, add, cross_entropy, make_op, mul_const, square_sum


# ---------------------------------------------------------------------------
# regularizers


def _branch_coefficients(b: RepBlock, dtype) -> tuple[np.ndarray, np.ndarray]:
    if b.bn3 is None or b.bn1 is None:
        raise ConfigError(f"{b.name}: custom L2 needs BN on both the 3x3 and 1x1 branches")
    t3 = b.bn3.coefficient().astype(dtype)[:, None, None, None]
    t1 = b.bn1.coefficient().astype(dtype)[:, None, None, None]
    return t3, t1


def _kernel_l2(b: RepBlock, normalize: bool) -> Tensor:
    k3, k1 = b.w3.weight, b.w1.weight
    t3, t1 = _branch_coefficients(b, k3.dtype)
    centre = k3.data[:, :, 1:2, 1:2]
    eq = centre * t3 + k1.data * t1
    den = t3 ** 2 + t1 ** 2 if normalize else np.ones_like(t3)
    ring = k3.data.astype(np.float64).copy()
    ring[:, :, 1, 1] = 0.0
    value = (eq.astype(np.float64) ** 2 / den).sum() + (ring ** 2).sum()

    def backward(g):
        g3 = 2.0 * g * k3.data
        g3[:, :, 1:2, 1:2] = 2.0 * g * eq * t3 / den
        return [g3.astype(k3.dtype), (2.0 * g * eq * t1 / den).astype(k1.dtype)]

    return make_op(np.asarray(value, dtype=k3.dtype), [k3, k1], backward)


def custom_l2(b: RepBlock) -> Tensor:
    """Regularize the block as if it were its fused kernel.

    Centre taps are penalized through ``eq = K3c * t3 + K1 * t1`` normalized by
    ``t3**2 + t1**2``; the ring of off-centre 3x3 taps gets plain L2.  The BN
    coefficients ``t`` are constants, so no gradient reaches gamma or the
    running statistics.
    """
    return _kernel_l2(b, normalize=True)


def eq5_l2(b: RepBlock) -> Tensor:
    """:func:`custom_l2` without the ``t3**2 + t1**2`` normalization (ring term kept)."""
    return _kernel_l2(b, normalize=False)


def plain_l2(params) -> Tensor:
    """Sum of squares over the given tensors."""
    params = list(params)
    if not params:
        return Tensor(np.zeros((), np.float32))
    return add([square_sum(p) for p in params])


def denominator_statistic(net: Network) -> float:
    """sum |t3|^2 + |t1|^2 over all blocks that carry both branch BNs."""
    total = 0.0
    for b in net.blocks:
        if b.bn3 is not None and b.bn1 is not None:
            total += float((b.bn3.coefficient() ** 2).sum() + (b.bn1.coefficient() ** 2).sum())
    return total


def measured_denominator(net: Network, dataset: Dataset, batches: int = 8, batch_size: int = 64) -> float:
    """:func:`denominator_statistic` with BN running statistics re-estimated on data.

    Works on a copy; the running variances are the plain average of the first
    ``batches`` unshuffled batch variances.  At initialization the stored
    running_var is the placeholder 1, not a property of the weights, so this is
    the starting value the trained statistic is compared against.
    """
    probe = copy.deepcopy(net)
    for i, (x, _) in enumerate(dataset.batches(min(batch_size, len(dataset)))):
        if i == batches:
            break
        probe.forward(x, train=True, momentum=1.0 / (i + 1))
    return denominator_statistic(probe)


def lemma1_gap(b: RepBlock) -> float:
    """max over channels of |beta_3x3 - beta_1x1|."""
    if b.bn3 is None or b.bn1 is None:
        raise ConfigError(f"{b.name}: the branch-bias gap needs BN on both conv branches")
    return float(np.max(np.abs(b.bn3.beta.data.astype(np.float64) - b.bn1.beta.data)))


def network_lemma1_gap(net: Network) -> Optional[float]:
    gaps = [lemma1_gap(b) for b in net.blocks if b.bn3 is not None and b.bn1 is not None]
    return max(gaps) if gaps else None


def max_abs_beta(net: Network) -> float:
    vals = [float(np.max(np.abs(b.bn3.beta.data))) for b in net.blocks if b.bn3 is not None]
    vals += [float(np.max(np.abs(b.bn1.beta.data))) for b in net.blocks if b.bn1 is not None]
    return max(vals, default=0.0)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimConfig:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    bn_momentum: float = 0.1
    decay_bn: bool = False
    decay_mask: Optional[dict] = None  # explicit per-parameter override

    def __post_init__(self):
        if self.lr0 < 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("need lr0 >= 0, 0 <= momentum < 1, weight_decay >= 0")
        if self.epochs < 0 or self.batch_size < 2:
            raise ConfigError("need epochs >= 0 and batch_size >= 2")


def default_decay_mask(net, loss_mode: LossMode, decay_bn: bool = False) -> dict[str, bool]:
    """Which parameters get optimizer weight decay.

    BN gamma/beta never decay unless ``decay_bn``.  Under plain L2 every weight
    tensor (conv kernels, head weight) decays; under the kernel regularizers
    nothing does, the regularizer replaces decay.
    """
    mask = {}
    for name, _ in net.named_parameters().items():
        is_bn = name.endswith(".gamma") or name.endswith(".beta")
        if is_bn:
            mask[name] = decay_bn
        elif LossMode(loss_mode) is LossMode.PLAIN_L2:
            mask[name] = name.endswith(".weight")
        else:
            mask[name] = False
    return mask


def sgd_step(params: dict[str, Tensor], velocity: dict[str, np.ndarray], lr: float,
             cfg: OptimConfig, mask: dict[str, bool]) -> None:
    """``v <- momentum * v + (grad + wd * theta * mask)``; ``theta <- theta - lr * v`` in place."""
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ConfigError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if mask.get(name, False) and cfg.weight_decay:
            g = g + p.data.dtype.type(cfg.weight_decay) * p.data
        v = velocity.get(name)
        v = g.astype(p.dtype, copy=True) if v is None else p.dtype.type(cfg.momentum) * v + g
        velocity[name] = v
        p.data = (p.data - p.data.dtype.type(lr) * v).astype(p.dtype, copy=False)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr0
    return lr0 * (1 + math.cos(math.pi * step / total_steps)) / 2


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    lemma1_gap: list = field(default_factory=list)
    denominator: list = field(default_factory=list)
    eval_accuracy: list = field(default_factory=list)
    step_lemma1_gap: list = field(default_factory=list)
    step_beta_scale: list = field(default_factory=list)
    denominator_initial: Optional[float] = None  # measured on data, see measured_denominator

    COLUMNS = ("epoch", "loss", "accuracy", "lr", "lemma1_gap", "denominator", "eval_accuracy")

    def rows(self) -> list[dict]:
        out = []
        for i in range(len(self.loss)):
            ev = self.eval_accuracy[i] if i < len(self.eval_accuracy) else None
            out.append(dict(epoch=i + 1, loss=self.loss[i], accuracy=self.accuracy[i], lr=self.lr[i],
                            lemma1_gap=self.lemma1_gap[i], denominator=self.denominator[i], eval_accuracy=ev))
        return out

    def to_csv(self, path: str) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            w.writeheader()
            for r in self.rows():
                w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        os.replace(tmp, path)


def regularizer(net: Network, loss_mode: LossMode) -> Optional[Tensor]:
    mode = LossMode(loss_mode)
    if mode is LossMode.PLAIN_L2:
        return None
    fn = custom_l2 if mode is LossMode.CUSTOM_L2 else eq5_l2
    terms = [fn(b) for b in net.blocks if b.bn3 is not None and b.bn1 is not None]
    if len(terms) != len(net.blocks):
        raise ConfigError(f"{mode.value} needs BN on both conv branches of every block")
    return add(terms)


def _first_nonfinite(params: dict[str, Tensor]) -> Optional[str]:
    for name, p in params.items():
        if not np.all(np.isfinite(p.data)) or (p.grad is not None and not np.all(np.isfinite(p.grad))):
            return name
    return None


def evaluate(model, dataset: Dataset, batch_size: int = 256,
             forward: Optional[Callable] = None) -> float:
    """Top-1 accuracy; train-form networks are run in eval mode."""
    if len(dataset) == 0:
        return float("nan")
    fwd = forward or (lambda x: model.forward(x) if getattr(model, "deploy", False) else model.forward(x, train=False))
    correct = 0
    for x, y in dataset.batches(batch_size):
        correct += int((fwd(x).data.argmax(axis=1) == y).sum())
    return correct / len(dataset)


def train(net: Network, dataset: Dataset, cfg: OptimConfig,
          loss_mode: Union[LossMode, str] = LossMode.PLAIN_L2,
          eval_dataset: Optional[Dataset] = None,
          checkpoint_path: Optional[str] = None, checkpoint_config: Optional[dict] = None,
          max_steps: Optional[int] = None) -> TrainHistory:
    """Mini-batch SGD with a cosine schedule; deterministic for a given seed.

    ``max_steps`` truncates the run (the schedule is then laid out over
    ``max_steps``); the last epoch may be partial.

    Raises :class:`TrainingDivergedError` naming the offending block/branch or
    parameter when anything turns non-finite.
    """
    if len(dataset) == 0:
        raise ConfigError("training set is empty")
    loss_mode = LossMode(loss_mode)
    params = net.named_parameters()
    mask = dict(default_decay_mask(net, loss_mode, cfg.decay_bn))
    if cfg.decay_mask:
        unknown = set(cfg.decay_mask) - set(mask)
        if unknown:
            raise ConfigError(f"decay_mask names unknown parameters: {sorted(unknown)}")
        mask.update(cfg.decay_mask)
    velocity: dict[str, np.ndarray] = {}
    shuffle = substream(cfg.seed, "shuffle")
    bs = min(cfg.batch_size, len(dataset))
    steps_per_epoch = len(dataset) // bs
    total = cfg.epochs * steps_per_epoch
    if max_steps is not None:
        total = min(total, max_steps)
    reg_coef = 0.5 * cfg.weight_decay

    try:
        hist = TrainHistory(denominator_initial=measured_denominator(net, dataset, batch_size=bs))
    except NumericError as e:
        raise TrainingDivergedError(f"at initialization: {e}") from e
    step = 0
    for epoch in range(cfg.epochs):
        losses, correct, seen, gaps = [], 0, 0, []
        lr = cfg.lr0
        if step >= total:
            break
        for x, y in dataset.batches(bs, shuffle, drop_last=True):
            if step >= total:
                break
            lr = cosine_lr(step, total, cfg.lr0)
            for p in params.values():
                p.grad = None
            try:
                logits = net.forward(x, train=True, momentum=cfg.bn_momentum)
                loss = cross_entropy(logits, y)
                reg = regularizer(net, loss_mode)
                total_loss = loss if reg is None else add([loss, mul_const(reg, reg_coef)])
            except NumericError as e:
                raise TrainingDivergedError(f"epoch {epoch + 1} step {step}: {e}") from e
            if not np.isfinite(total_loss.data):
                raise TrainingDivergedError(f"epoch {epoch + 1} step {step}: non-finite loss")
            total_loss.backward()
            bad = _first_nonfinite(params)
            if bad:
                raise TrainingDivergedError(f"epoch {epoch + 1} step {step}: non-finite gradient in {bad}")
            sgd_step(params, velocity, lr, cfg, mask)
            bad = _first_nonfinite(params)
            if bad:
                raise TrainingDivergedError(f"epoch {epoch + 1} step {step}: {bad} became non-finite")

            losses.append(float(total_loss.data))
            correct += int((logits.data.argmax(axis=1) == y).sum())
            seen += len(y)
            gap = network_lemma1_gap(net)
            hist.step_lemma1_gap.append(gap)
            hist.step_beta_scale.append(max_abs_beta(net))
            if gap is not None:
                gaps.append(gap)
            step += 1
        hist.loss.append(float(np.mean(losses)) if losses else float("nan"))
        hist.accuracy.append(correct / seen if seen else float("nan"))
        hist.lr.append(lr)
        hist.lemma1_gap.append(max(gaps) if gaps else None)
        hist.denominator.append(denominator_statistic(net))
        if eval_dataset is not None:
            hist.eval_accuracy.append(evaluate(net, eval_dataset))

    if checkpoint_path:
        from .checkpoint import save_checkpoint
        save_checkpoint(net, checkpoint_path, state={f"velocity/{k}": v for k, v in velocity.items()},
                        config=checkpoint_config)
    return hist
