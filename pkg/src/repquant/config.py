"""Run configuration: an INI-style file with fixed sections and keys.

Grammar: ``[section]`` headers followed by ``key = value`` lines; ``#`` or
``;`` start comments.  Lists are comma separated, booleans are
``true``/``false``.  Unknown sections or keys are errors, and every problem
in a file is reported at once.  The accepted keys and defaults are the
fields of the dataclasses below (see README for the full table).
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields

from .blocks import LossMode, NetworkSpec, default_loss_mode, variant_layout
from .errors import ConfigError
from .training import OptimConfig


@dataclass
class NetworkSection:
    widths: tuple = (8, 16, 32, 64)
    blocks: tuple = (1, 2, 2, 1)
    in_channels: int = 3
    num_classes: int = 10
    groups: int = 1
    bias_on_unnormalized_branches: bool = False


@dataclass
class BlockSection:
    variant: str = "S4"
    loss_mode: str = ""  # empty: the variant's default (custom_l2 for S0, plain_l2 otherwise)


@dataclass
class OptimSection:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 10
    batch_size: int = 64
    bn_momentum: float = 0.1
    decay_bn: bool = False


@dataclass
class DataSection:
    source: str = "synth"  # synth | cifar10
    dir: str = ""
    n_train: int = 5000
    n_test: int = 1000
    synth_noise: float = 0.35


@dataclass
class QuantSection:
    bits: int = 8
    method: str = "max"  # max | mse
    calib_batches: int = 4
    calib_batch_size: int = 64
    qat_epochs: int = 2
    qat_lr: float = 0.001


@dataclass
class RunSection:
    seed: int = 0
    output_dir: str = "runs/default"


SECTIONS = {"network": NetworkSection, "block": BlockSection, "optim": OptimSection,
            "data": DataSection, "quant": QuantSection, "run": RunSection}


@dataclass
class RunConfig:
    network: NetworkSection = field(default_factory=NetworkSection)
    block: BlockSection = field(default_factory=BlockSection)
    optim: OptimSection = field(default_factory=OptimSection)
    data: DataSection = field(default_factory=DataSection)
    quant: QuantSection = field(default_factory=QuantSection)
    run: RunSection = field(default_factory=RunSection)

    # -- derived objects ---------------------------------------------------
    def network_spec(self) -> NetworkSpec:
        n = self.network
        return NetworkSpec(n.widths, n.blocks, n.in_channels, n.num_classes, self.block.variant,
                           n.groups, n.bias_on_unnormalized_branches)

    def loss_mode(self) -> LossMode:
        return LossMode(self.block.loss_mode) if self.block.loss_mode else default_loss_mode(self.block.variant)

    def optim_config(self) -> OptimConfig:
        o = self.optim
        return OptimConfig(o.lr0, o.momentum, o.weight_decay, o.epochs, o.batch_size, self.run.seed,
                           o.bn_momentum, o.decay_bn)

    def to_dict(self) -> dict:
        out = {}
        for sec in SECTIONS:
            obj = getattr(self, sec)
            out[sec] = {f.name: (list(v) if isinstance(v := getattr(obj, f.name), tuple) else v)
                        for f in fields(obj)}
        return out


def _convert(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low not in ("true", "false"):
            raise ValueError(f"expected true/false, got {raw!r}")
        return low == "true"
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(p) for p in raw.split(",") if p.strip())
    return raw


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config(text: str) -> RunConfig:
    """Parse and validate; raises :class:`ConfigError` listing every problem."""
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config syntax: {e}") from e
    errors = []
    cfg = RunConfig()
    for sec in cp.sections():
        if sec not in SECTIONS:
            errors.append(f"unknown section [{sec}]")
            continue
        obj = getattr(cfg, sec)
        known = {f.name: f for f in fields(obj)}
        for key, raw in cp.items(sec):
            if key not in known:
                errors.append(f"[{sec}] unknown key {key!r}")
                continue
            try:
                setattr(obj, key, _convert(raw, getattr(obj, key)))
            except ValueError as e:
                errors.append(f"[{sec}] {key}: {e}")
    errors += validate(cfg)
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
    return cfg


def validate(cfg: RunConfig) -> list[str]:
    errors = []
    try:
        variant_layout(cfg.block.variant)
    except ConfigError as e:
        errors.append(f"[block] variant: {e}")
    if cfg.block.loss_mode and cfg.block.loss_mode not in {m.value for m in LossMode}:
        errors.append(f"[block] loss_mode: unknown {cfg.block.loss_mode!r}")
    if not errors:
        try:
            spec = cfg.network_spec()
            if cfg.loss_mode() is not LossMode.PLAIN_L2:
                layout = variant_layout(spec.variant)
                if not layout["bn_on_1x1"]:
                    errors.append(f"[block] {cfg.loss_mode().value} needs BN on the 1x1 branch")
            spec.block_configs()
        except ConfigError as e:
            errors.append(f"[network] {e}")
    try:
        cfg.optim_config()
    except ConfigError as e:
        errors.append(f"[optim] {e}")
    if cfg.data.source not in ("synth", "cifar10"):
        errors.append(f"[data] source must be synth or cifar10, got {cfg.data.source!r}")
    if cfg.data.source == "cifar10" and not cfg.data.dir:
        errors.append("[data] dir is required for source = cifar10")
    if cfg.data.n_train < 2 or cfg.data.n_test < 0:
        errors.append("[data] need n_train >= 2 and n_test >= 0")
    if cfg.quant.method not in ("max", "mse"):
        errors.append(f"[quant] method must be max or mse, got {cfg.quant.method!r}")
    if not 2 <= cfg.quant.bits <= 16:
        errors.append("[quant] bits must be in [2, 16]")
    if cfg.quant.calib_batches < 1 or cfg.quant.calib_batch_size < 1:
        errors.append("[quant] calibration needs at least one non-empty batch")
    return errors


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        lines.append(f"[{sec}]")
        lines += [f"{f.name} = {_format(getattr(obj, f.name))}" for f in fields(obj)]
        lines.append("")
    return "\n".join(lines)


def load_config(path: str) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def config_from_dict(d: dict) -> RunConfig:
    """Inverse of :meth:`RunConfig.to_dict` (used for checkpoint config echoes)."""
    cfg = RunConfig()
    for sec, values in d.items():
        obj = getattr(cfg, sec)
        for k, v in values.items():
            setattr(obj, k, tuple(v) if isinstance(getattr(obj, k), tuple) else v)
    return cfg
