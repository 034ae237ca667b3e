"""Dataset containers, the CIFAR-10 binary reader and a synthetic stand-in."""
from __future__ import annotations

import glob
import os
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, DatasetFormatError
from .seeding import substream

CIFAR_RECORD_BYTES = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465])
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616])


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ConfigError("images must be (N, C, H, W) with one label per image")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None,
                drop_last: bool = False) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        stop = len(self) - (len(self) % batch_size if drop_last and len(self) >= batch_size else 0)
        for i in range(0, stop, batch_size):
            j = order[i:i + batch_size]
            yield self.images[j], self.labels[j]


def normalize_cifar(pixels: np.ndarray) -> np.ndarray:
    """uint8 (N, 3, H, W) -> per-channel standardized float32."""
    x = pixels.astype(np.float64) / 255.0
    x = (x - CIFAR_MEAN[None, :, None, None]) / CIFAR_STD[None, :, None, None]
    return x.astype(np.float32)


def read_cifar10_records(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Raw (uint8 pixels, labels) from one binary batch file."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD_BYTES:
        raise DatasetFormatError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD_BYTES}")
    rec = raw.reshape(-1, CIFAR_RECORD_BYTES)
    return rec[:, 1:].reshape((-1,) + CIFAR_SHAPE), rec[:, 0].astype(np.int64)


def load_cifar10(source: Union[str, Sequence[str]], split: str = "train",
                 limit: Optional[int] = None) -> Dataset:
    """Load CIFAR-10 binary batches (1 label byte + 3072 CHW pixel bytes per record).

    ``source`` may be a directory holding ``data_batch_*.bin`` / ``test_batch.bin``,
    a single file, or a list of files.
    """
    if isinstance(source, str) and os.path.isdir(source):
        pattern = "data_batch_*.bin" if split == "train" else "test_batch.bin"
        files = sorted(glob.glob(os.path.join(source, pattern)))
        if not files:
            raise DatasetFormatError(f"no {pattern} files under {source}")
    elif isinstance(source, str):
        files = [source]
    else:
        files = list(source)
    pix, lab = [], []
    for f in files:
        p, l = read_cifar10_records(f)
        pix.append(p)
        lab.append(l)
    pixels = np.concatenate(pix) if pix else np.zeros((0,) + CIFAR_SHAPE, np.uint8)
    labels = np.concatenate(lab) if lab else np.zeros(0, np.int64)
    if limit is not None:
        pixels, labels = pixels[:limit], labels[:limit]
    return Dataset(normalize_cifar(pixels), labels)


def write_cifar10_records(path: str, pixels: np.ndarray, labels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if pixels.shape[1:] != CIFAR_SHAPE or len(pixels) != len(labels):
        raise ConfigError("CIFAR records need (N, 3, 32, 32) uint8 pixels and N labels")
    rec = np.concatenate([labels[:, None], pixels.reshape(len(pixels), -1)], axis=1)
    tmp = f"{path}.tmp"
    rec.tofile(tmp)
    os.replace(tmp, path)


def _smooth_field(rng: np.random.Generator, c: int, h: int, w: int, bumps: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    field = np.zeros((c, h, w))
    for _ in range(bumps):
        cy, cx = rng.uniform(0, 1, 2)
        width = rng.uniform(0.08, 0.3)
        amp = rng.normal(size=c)
        field += amp[:, None, None] * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
    return field


def synth_pixels(seed: int, n: int, classes: int, size: tuple = (3, 32, 32), noise: float = 0.35,
                 shift: int = 2, bumps: int = 6) -> tuple[np.ndarray, np.ndarray]:
    """Class-conditional blob images as uint8 pixels plus balanced labels.

    Each class owns a smooth random prototype; samples are the prototype with a
    random contrast, a small circular shift and Gaussian pixel noise.
    """
    if n < classes or classes < 2:
        raise ConfigError("need classes >= 2 and n >= classes")
    c, h, w = size
    protos = _smooth_field(substream(seed, "synth-prototypes"), c * classes, h, w, bumps * classes)
    protos = protos.reshape(classes, c, h, w)
    protos = protos / (np.abs(protos).max(axis=(1, 2, 3), keepdims=True) + 1e-12)
    rng = substream(seed, "data")
    labels = rng.permutation(np.arange(n) % classes)
    contrast = rng.uniform(0.7, 1.3, n)
    dy, dx = rng.integers(-shift, shift + 1, (2, n))
    imgs = np.empty((n, c, h, w))
    for i in range(n):
        imgs[i] = np.roll(protos[labels[i]], (dy[i], dx[i]), axis=(1, 2)) * contrast[i]
    imgs += rng.normal(scale=noise, size=imgs.shape)
    pixels = np.clip(np.round(127.5 + 100.0 * imgs), 0, 255).astype(np.uint8)
    return pixels, labels.astype(np.int64)


def synth_dataset(seed: int, n: int, classes: int, size: tuple = (3, 32, 32), **kw) -> Dataset:
    """Deterministic synthetic image classification set in CIFAR-like normalization."""
    pixels, labels = synth_pixels(seed, n, classes, size, **kw)
    if size[0] == 3:
        return Dataset(normalize_cifar(pixels), labels)
    return Dataset(((pixels.astype(np.float64) - 127.5) / 64.0).astype(np.float32), labels)


def synth_split(seed: int, n_train: int, n_test: int, classes: int = 10, size: tuple = (3, 32, 32),
                **kw) -> tuple[Dataset, Dataset]:
    """Train/test sets drawn from the same class prototypes (one draw, split in order)."""
    full = synth_dataset(seed, n_train + n_test, classes, size, **kw)
    idx = np.arange(len(full))
    return full.subset(idx[:n_train]), full.subset(idx[n_train:])
