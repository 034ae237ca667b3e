"""Toy-scale FP32 / PTQ / QAT comparison of block settings."""
from __future__ import annotations

import os
import tempfile
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .blocks import LossMode, NetworkSpec, build_network, default_loss_mode
from .data import Dataset, load_cifar10, synth_pixels, write_cifar10_records
from .fusion import to_deploy
from .quant import calibrate, qat_finetune, quantized_accuracy
from .training import OptimConfig, evaluate, train


@dataclass
class StudyResult:
    variant: str
    loss_mode: str
    seed: int
    fp32: float
    ptq: float
    qat: Optional[float]
    denominator_initial: float
    denominator_final: float

    @property
    def ptq_drop(self) -> float:
        return self.fp32 - self.ptq

    def to_dict(self) -> dict:
        return {**asdict(self), "ptq_drop": self.ptq_drop}


# Toy protocol.  lr0 is the usual 0.1 at batch 256 scaled linearly to batch 64;
# QAT starts from 0.01 with the same scaling.
TOY_OPTIM = dict(lr0=0.025, momentum=0.9, weight_decay=1e-4, epochs=20, batch_size=64)
TOY_QAT = dict(lr0=0.0025, momentum=0.9, weight_decay=1e-4, epochs=10, batch_size=64)
TOY_NOISE = 6.0  # synthetic difficulty: A0-mini lands near 50-60% test accuracy


def cifar_format_split(seed: int, n_train: int, n_test: int, root: Optional[str] = None,
                       noise: float = TOY_NOISE) -> tuple[Dataset, Dataset]:
    """Synthetic images pushed through the CIFAR-10 binary writer and reader.

    With ``root`` pointing at real CIFAR-10 batches those are used instead.
    """
    if root:
        return load_cifar10(root, "train", n_train), load_cifar10(root, "test", n_test)
    pixels, labels = synth_pixels(seed, n_train + n_test, 10, noise=noise)
    with tempfile.TemporaryDirectory() as d:
        write_cifar10_records(os.path.join(d, "data_batch_1.bin"), pixels[:n_train], labels[:n_train])
        write_cifar10_records(os.path.join(d, "test_batch.bin"), pixels[n_train:], labels[n_train:])
        return load_cifar10(d, "train"), load_cifar10(d, "test")


def run_setting(variant: str, seed: int, train_set: Dataset, test_set: Dataset, optim: OptimConfig,
                loss_mode: Optional[LossMode] = None, calib_batches: int = 4, calib_batch_size: int = 64,
                qat: Optional[OptimConfig] = None, method: str = "max") -> StudyResult:
    """Train, fuse, calibrate and (optionally) QAT one A0-mini model."""
    loss_mode = loss_mode or default_loss_mode(variant)
    net = build_network(NetworkSpec.a0_mini(variant=variant), seed)
    hist = train(net, train_set, optim, loss_mode)
    deploy = to_deploy(net)
    calib = [train_set.images[i:i + calib_batch_size]
             for i in range(0, calib_batches * calib_batch_size, calib_batch_size)]
    plan = calibrate(deploy, calib, method)
    fp32 = evaluate(deploy, test_set)
    ptq = quantized_accuracy(deploy, plan, test_set)
    qat_acc = None
    if qat is not None:
        tuned, tuned_plan = qat_finetune(deploy, train_set, qat, plan)
        qat_acc = quantized_accuracy(tuned, tuned_plan, test_set)
    return StudyResult(variant, loss_mode.value, seed, fp32, ptq, qat_acc, hist.denominator_initial,
                       hist.denominator[-1] if hist.denominator else hist.denominator_initial)


def toy_study(seeds=(0, 1, 2), variants=("S0", "S4"), qat_variants=("S0",), n_train: int = 5000,
              n_test: int = 1000, root: Optional[str] = None, data_seed: int = 0, log=None) -> list[StudyResult]:
    """The toy-scale protocol: one dataset, every variant under every seed."""
    train_set, test_set = cifar_format_split(data_seed, n_train, n_test, root)
    out = []
    for seed in seeds:
        for v in variants:
            qat = OptimConfig(seed=seed, **TOY_QAT) if v in qat_variants else None
            r = run_setting(v, seed, train_set, test_set, OptimConfig(seed=seed, **TOY_OPTIM), qat=qat)
            if log:
                log(r)
            out.append(r)
    return out


def median(values) -> float:
    return float(np.median(np.asarray(list(values), dtype=np.float64)))
