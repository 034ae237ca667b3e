"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      4 bytes  b"RQCK"
    version    u32      FORMAT_VERSION
    mode       u8       0 = train, 1 = deploy
    header     u32 length + UTF-8 JSON (network spec, seed, config echo, quant plan)
    count      u32      number of tensors
    tensors    repeated: u16 name length, name, u8 dtype code, u8 ndim,
               u32 * ndim shape, u64 byte length, raw little-endian data

Model tensors are stored under ``model/``; optional optimizer state under
``optim/``.  The header JSON is written canonically (sorted keys, no spaces)
so save -> load -> save reproduces the file byte for byte.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .blocks import Network, NetworkSpec, build_network
from .errors import (BadMagicError, CheckpointError, ModeMismatchError, TruncatedCheckpointError,
                     VersionMismatchError)
from .fusion import DeployNetwork
from .quant import QuantPlan

MAGIC = b"RQCK"
FORMAT_VERSION = 1
MODES = {"train": 0, "deploy": 1}
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i4"), 4: np.dtype("<i8"), 5: np.dtype("u1")}
DTYPE_CODES = {v: k for k, v in DTYPES.items()}


@dataclass
class Checkpoint:
    mode: str
    model: Union[Network, DeployNetwork]
    state: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    qplan: Optional[QuantPlan] = None
    version: int = FORMAT_VERSION


def _dtype_code(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    code = DTYPE_CODES.get(np.dtype(dt.str.replace("=", "<")))
    if code is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    return code


def encode(model, state: Optional[dict] = None, config: Optional[dict] = None,
           qplan: Optional[QuantPlan] = None) -> bytes:
    mode = "deploy" if getattr(model, "deploy", False) else "train"
    header = {"spec": model.spec.to_dict(), "seed": getattr(model, "seed", 0), "config": config or {}}
    if qplan is not None:
        header["qplan"] = qplan.to_dict()
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    tensors = [(f"model/{k}", v) for k, v in model.state_arrays().items()]
    tensors += [(f"optim/{k}", np.asarray(v)) for k, v in (state or {}).items()]
    parts = [MAGIC, struct.pack("<IB", FORMAT_VERSION, MODES[mode]),
             struct.pack("<I", len(hbytes)), hbytes, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        data = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<Q", len(data)) + data)
    return b"".join(parts)


def save_checkpoint(model, path: str, state: Optional[dict] = None, config: Optional[dict] = None,
                    qplan: Optional[QuantPlan] = None) -> None:
    """Write atomically (temp file then rename)."""
    blob = encode(model, state, config, qplan)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"checkpoint truncated at byte {len(self.buf)} (needed {self.pos + n})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes, expect_mode: Optional[str] = None) -> Checkpoint:
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        if len(buf) < 4 and MAGIC.startswith(buf):
            raise TruncatedCheckpointError("checkpoint truncated inside the magic number")
        raise BadMagicError("not a checkpoint (bad magic)")
    r.take(4)
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        newer = "newer" if version > FORMAT_VERSION else "unsupported older"
        raise VersionMismatchError(f"checkpoint format version {version} is {newer}; this reader handles {FORMAT_VERSION}")
    (mode_code,) = r.unpack("<B")
    modes = {v: k for k, v in MODES.items()}
    if mode_code not in modes:
        raise CheckpointError(f"unknown mode flag {mode_code}")
    mode = modes[mode_code]
    if expect_mode is not None and expect_mode != mode:
        raise ModeMismatchError(f"checkpoint is in {mode} mode, {expect_mode} mode was required")
    (hlen,) = r.unpack("<I")
    header = json.loads(r.take(hlen).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        (nbytes,) = r.unpack("<Q")
        dt = DTYPES[code]
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise CheckpointError(f"{name}: byte length does not match shape {shape}")
        tensors[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after the tensor table")

    spec = NetworkSpec(**header["spec"])
    model_arrays = {k[6:]: v for k, v in tensors.items() if k.startswith("model/")}
    state = {k[6:]: v for k, v in tensors.items() if k.startswith("optim/")}
    if mode == "train":
        model = build_network(spec, header.get("seed", 0))
    else:
        model = DeployNetwork.empty(spec)
    model.load_state_arrays(model_arrays)
    qplan = QuantPlan.from_dict(header["qplan"]) if "qplan" in header else None
    return Checkpoint(mode, model, state, header.get("config", {}), qplan, version)


def load_checkpoint(path: str, expect_mode: Optional[str] = None) -> Checkpoint:
    """Read a checkpoint; ``expect_mode`` rejects train/deploy mismatches."""
    with open(path, "rb") as fh:
        return decode(fh.read(), expect_mode)
