"""Weight / activation distribution reports and quantization-error curves.

Reports are flat dataclasses so they export to CSV or JSON without loss.
The JSON layout is::

    {"schema": "<record type>", "version": 1, "records": [{...}, ...]}

with the per-record fields given by :data:`REPORT_SCHEMAS` (JSON Schema).
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError
from .fusion import DeployNetwork, fused_arrays
from .quant import QuantPlan, fake_quant, forward_with, quantized_forward
from .tensor import ConvKernel, Tensor, conv2d, linear

HIST_BINS = 32


@dataclass
class LayerReport:
    index: int
    name: str
    weight_mean: float
    weight_std: float
    weight_min: float
    weight_max: float
    weight_absmax: float
    hist_lo: float
    hist_hi: float
    hist_counts: tuple
    coef_3x3_max: Optional[float] = None
    coef_1x1_max: Optional[float] = None
    coef_identity_max: Optional[float] = None
    coef_post_max: Optional[float] = None


@dataclass
class ActivationReport:
    index: int
    name: str
    pre_min: float
    pre_max: float
    pre_mean: float
    pre_std: float
    std_3x3: Optional[float] = None
    std_1x1: Optional[float] = None
    std_identity: Optional[float] = None
    mean_3x3: Optional[float] = None
    mean_1x1: Optional[float] = None
    mean_identity: Optional[float] = None


@dataclass
class MSERecord:
    k: int
    layer: str
    mse: float


RECORD_TYPES = {cls.__name__: cls for cls in (LayerReport, ActivationReport, MSERecord)}

_JSON_TYPES = {int: "integer", float: "number", str: "string"}


def _schema_for(cls) -> dict:
    props, required = {}, []
    for f in fields(cls):
        t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
        if t == "tuple":
            props[f.name] = {"type": "array", "items": {"type": "integer"}}
        elif t.startswith("Optional"):
            props[f.name] = {"type": ["number", "null"]}
        else:
            props[f.name] = {"type": {"int": "integer", "float": "number", "str": "string"}[t]}
        required.append(f.name)
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "type": "object",
        "required": ["schema", "version", "records"],
        "properties": {
            "schema": {"const": cls.__name__},
            "version": {"const": 1},
            "records": {"type": "array", "items": {"type": "object", "properties": props,
                                                    "required": required, "additionalProperties": False}},
        },
    }


REPORT_SCHEMAS = {name: _schema_for(cls) for name, cls in RECORD_TYPES.items()}


# ---------------------------------------------------------------------------
# weight distributions


def _weight_stats(w: np.ndarray) -> dict:
    w = w.astype(np.float64).ravel()
    lo, hi = float(w.min()), float(w.max())
    counts, _ = np.histogram(w, bins=HIST_BINS, range=(lo, hi) if hi > lo else (lo - 0.5, hi + 0.5))
    return dict(weight_mean=float(w.mean()), weight_std=float(w.std()), weight_min=lo, weight_max=hi,
                weight_absmax=float(np.abs(w).max()), hist_lo=lo, hist_hi=hi,
                hist_counts=tuple(int(c) for c in counts))


def weight_report(network, fused: bool = True) -> list[LayerReport]:
    """Per-layer weight summary.

    For train-form networks each block also reports the largest
    ``gamma / sqrt(eps + var)`` of every BN it carries.  ``fused=True``
    summarizes the deploy kernel; ``fused=False`` the raw 3x3 kernel.
    """
    out = []
    if getattr(network, "deploy", False):
        if not fused:
            raise ConfigError("a deploy network only has fused weights")
        for i, f in enumerate(network.convs):
            out.append(LayerReport(i, f"convs.{i}", **_weight_stats(f.weight.data)))
    else:
        for i, b in enumerate(network.blocks):
            w = fused_arrays(b)[0] if fused else b.w3.weight.data
            coefs = {key: float(np.max(bn.coefficient())) for key, bn in b.bn_layers().items()}
            out.append(LayerReport(i, b.name, **_weight_stats(w), coef_3x3_max=coefs.get("bn3"),
                                   coef_1x1_max=coefs.get("bn1"), coef_identity_max=coefs.get("bn0"),
                                   coef_post_max=coefs.get("bn_post")))
    out.append(LayerReport(len(out), "head", **_weight_stats(network.head_weight.data)))
    return out


# ---------------------------------------------------------------------------
# activation distributions


def _moments(a: np.ndarray) -> tuple[float, float, float, float]:
    a = a.astype(np.float64)
    return float(a.min()), float(a.max()), float(a.mean()), float(a.std())


def activation_report(network, batch) -> list[ActivationReport]:
    """Pre-ReLU statistics of every block on one batch (eval mode).

    Multi-branch blocks also report each branch's mean and std.
    """
    x = np.asarray(batch.data if isinstance(batch, Tensor) else batch)
    out = []
    if getattr(network, "deploy", False):
        h = Tensor(x)
        for i, f in enumerate(network.convs):
            pre = conv2d(h, f)
            lo, hi, mu, sd = _moments(pre.data)
            out.append(ActivationReport(i, f"convs.{i}", lo, hi, mu, sd))
            h = Tensor(np.maximum(pre.data, 0))
        return out
    h = Tensor(x)
    for i, b in enumerate(network.blocks):
        branches = b.branch_outputs(h, train=False)
        pre = b.preactivation(h, train=False)
        lo, hi, mu, sd = _moments(pre.data)
        extra = {}
        for key, t in branches.items():
            _, _, m, s = _moments(t.data)
            extra[f"mean_{key}"], extra[f"std_{key}"] = m, s
        out.append(ActivationReport(i, b.name, lo, hi, mu, sd, **extra))
        h = Tensor(np.maximum(pre.data, 0))
    return out


# ---------------------------------------------------------------------------
# quantization error


def _as_batches(batches) -> list[np.ndarray]:
    if isinstance(batches, np.ndarray):
        return [batches]
    return [b[0] if isinstance(b, tuple) else np.asarray(b) for b in batches]


def _logit_mse(net, plan, xs, layers, weights=True, acts=True) -> float:
    sq, count = 0.0, 0
    for x in xs:
        ref = net.forward(x).data.astype(np.float64)
        q = quantized_forward(net, plan, x, layers, weights, acts).data.astype(np.float64)
        sq += float(((ref - q) ** 2).sum())
        count += ref.size
    return sq / count


def cumulative_mse(net: DeployNetwork, plan: QuantPlan, batches, activations_only: bool = False) -> list[MSERecord]:
    """Logit MSE as layers are switched to INT8 one after another in forward order.

    Entry ``k`` quantizes layers ``1..k`` (weights and inputs, or inputs only
    with ``activations_only``); entry 0 is the all-float baseline (0).
    """
    xs = _as_batches(batches)
    names = net.layer_names()
    out = [MSERecord(0, "", 0.0)]
    for k in range(1, len(names) + 1):
        out.append(MSERecord(k, names[k - 1], _logit_mse(net, plan, xs, names[:k], not activations_only, True)))
    return out


def layer_mse(net: DeployNetwork, plan: QuantPlan, batches) -> list[MSERecord]:
    """Local error of each layer: its output with only that layer quantized, float inputs."""
    xs = _as_batches(batches)
    names = net.layer_names()
    sq = np.zeros(len(names))
    cnt = np.zeros(len(names))
    for x in xs:
        captured = {}

        def capture(name, inp, w):
            captured[name] = (inp.data, w.data)
            return inp, w

        forward_with(net, x, capture)
        for i, name in enumerate(names):
            inp, w = captured[name]
            lq = plan.layers[name]
            qi, qw = fake_quant(inp, lq.act), fake_quant(w, lq.weight)
            if name == "head":
                ref = linear(Tensor(inp), Tensor(w), net.head_bias).data
                got = linear(Tensor(qi), Tensor(qw), net.head_bias).data
            else:
                f = net.convs[i]
                ref = conv2d(Tensor(inp), ConvKernel(Tensor(w), f.bias, f.stride, f.padding, f.groups)).data
                got = conv2d(Tensor(qi), ConvKernel(Tensor(qw), f.bias, f.stride, f.padding, f.groups)).data
            sq[i] += float(((ref.astype(np.float64) - got) ** 2).sum())
            cnt[i] += ref.size
    return [MSERecord(i + 1, name, float(sq[i] / cnt[i])) for i, name in enumerate(names)]


# ---------------------------------------------------------------------------
# export


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, tuple):
        return " ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_cell(raw: str, ftype: str):
    if ftype == "tuple":
        return tuple(int(x) for x in raw.split()) if raw else ()
    if ftype.startswith("Optional"):
        return None if raw == "" else float(raw)
    return {"int": int, "float": float, "str": str}[ftype](raw)


def export_report(reports: Sequence, path: str, format: str = "csv", record_type=None) -> None:
    """Write records as CSV (one row each, fixed column order) or schema-tagged JSON."""
    reports = list(reports)
    cls = record_type or (type(reports[0]) if reports else None)
    if cls is None:
        raise ConfigError("record_type is required to export an empty report")
    if any(type(r) is not cls for r in reports):
        raise ConfigError("all records in one report must share a type")
    cols = [f.name for f in fields(cls)]
    tmp = f"{path}.tmp"
    if format == "csv":
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in reports:
                w.writerow([_cell(getattr(r, c)) for c in cols])
    elif format == "json":
        recs = []
        for r in reports:
            d = asdict(r)
            recs.append({c: list(d[c]) if isinstance(d[c], tuple) else d[c] for c in cols})
        with open(tmp, "w") as fh:
            json.dump({"schema": cls.__name__, "version": 1, "records": recs}, fh, indent=1)
            fh.write("\n")
    else:
        raise ConfigError(f"unknown report format {format!r}")
    os.replace(tmp, path)


def read_report(path: str, record_type=None) -> list:
    """Inverse of :func:`export_report`; CSV record types are recognized from the header."""
    if path.endswith(".json"):
        with open(path) as fh:
            doc = json.load(fh)
        cls = RECORD_TYPES[doc["schema"]]
        ftypes = {f.name: f.type for f in fields(cls)}
        return [cls(**{k: tuple(v) if ftypes[k] == "tuple" else v for k, v in r.items()}) for r in doc["records"]]
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    cls = record_type
    if cls is None:
        matches = [c for c in RECORD_TYPES.values() if [f.name for f in fields(c)] == header]
        if not matches:
            raise ConfigError(f"{path}: header matches no known report type")
        cls = matches[0]
    ftypes = [f.type for f in fields(cls)]
    return [cls(*[_parse_cell(v, t) for v, t in zip(row, ftypes)]) for row in rows[1:]]
