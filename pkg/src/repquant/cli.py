"""Command line entry point: ``repquant <subcommand> ...``.

Results go to stdout as one JSON object.  Failures print
``{"error": <type>, "message": <text>}`` on stderr and exit with 1 (runtime)
or 2 (usage or invalid configuration).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from typing import Optional

import numpy as np

from .blocks import build_network
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_from_dict, load_config, serialize_config
from .data import Dataset, load_cifar10, synth_split
from .diagnostics import (LayerReport, activation_report, cumulative_mse, export_report, layer_mse,
                          weight_report)
from .errors import ConfigError, RepQuantError
from .fusion import fusion_residual, probe_batch, to_deploy
from .quant import QuantPlan, calibrate, quantized_accuracy
from .training import evaluate, network_lemma1_gap, max_abs_beta, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def run_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Train and test sets described by the ``[data]`` section."""
    d = cfg.data
    if d.source == "cifar10":
        return (load_cifar10(d.dir, "train", d.n_train), load_cifar10(d.dir, "test", d.n_test))
    return synth_split(cfg.run.seed, d.n_train, d.n_test, cfg.network.num_classes,
                       (cfg.network.in_channels, 32, 32), noise=d.synth_noise)


def calibration_batches(cfg: RunConfig, data: Dataset) -> list[np.ndarray]:
    q = cfg.quant
    return [x for x, _ in data.subset(np.arange(min(len(data), q.calib_batches * q.calib_batch_size)))
            .batches(q.calib_batch_size)]


def _atomic_text(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _resolve_config(args, ckpt=None) -> RunConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    if ckpt is not None and ckpt.config:
        return config_from_dict(ckpt.config)
    return RunConfig()


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> dict:
    cfg = load_config(args.config)
    out_dir = args.out_dir or cfg.run.output_dir
    os.makedirs(out_dir, exist_ok=True)
    train_set, test_set = run_datasets(cfg)
    net = build_network(cfg.network_spec(), cfg.run.seed)
    ckpt_path = os.path.join(out_dir, "train.ckpt")
    hist = train(net, train_set, cfg.optim_config(), cfg.loss_mode(), test_set if len(test_set) else None,
                 checkpoint_path=ckpt_path, checkpoint_config=cfg.to_dict())
    hist.to_csv(os.path.join(out_dir, "history.csv"))
    _atomic_text(os.path.join(out_dir, "config.ini"), serialize_config(cfg))
    return dict(checkpoint=ckpt_path, epochs=len(hist.loss), final_loss=hist.loss[-1] if hist.loss else None,
                train_accuracy=hist.accuracy[-1] if hist.accuracy else None,
                eval_accuracy=hist.eval_accuracy[-1] if hist.eval_accuracy else None,
                denominator_initial=hist.denominator_initial,
                denominator_final=hist.denominator[-1] if hist.denominator else None)


def cmd_fuse(args) -> dict:
    ck = load_checkpoint(args.checkpoint, expect_mode="train")
    deploy = to_deploy(ck.model, check=True)
    residuals = [fusion_residual(b, f, probe_batch(b.config.c1)) for b, f in zip(ck.model.blocks, deploy.convs)]
    save_checkpoint(deploy, args.out, config=ck.config)
    return dict(checkpoint=args.out, blocks=len(deploy.convs), max_residual=max(residuals, default=0.0))


def _calibrated_plan(args, ck, cfg) -> QuantPlan:
    train_set, _ = run_datasets(cfg)
    method = getattr(args, "method", None) or cfg.quant.method
    bits = getattr(args, "bits", None) or cfg.quant.bits
    return calibrate(ck.model, calibration_batches(cfg, train_set), method, bits)


def cmd_calibrate(args) -> dict:
    ck = load_checkpoint(args.checkpoint, expect_mode="deploy")
    cfg = _resolve_config(args, ck)
    plan = _calibrated_plan(args, ck, cfg)
    plan.to_json(args.out)
    return dict(qparams=args.out, method=plan.method, bits=plan.bits, layers=list(plan.layers))


def cmd_quantize(args) -> dict:
    ck = load_checkpoint(args.checkpoint, expect_mode="deploy")
    cfg = _resolve_config(args, ck)
    plan = QuantPlan.from_json(args.qparams) if args.qparams else _calibrated_plan(args, ck, cfg)
    save_checkpoint(ck.model, args.out, config=ck.config, qplan=plan)
    return dict(checkpoint=args.out, method=plan.method, bits=plan.bits)


def cmd_eval(args) -> dict:
    ck = load_checkpoint(args.checkpoint)
    cfg = _resolve_config(args, ck)
    _, test_set = run_datasets(cfg)
    if len(test_set) == 0:
        raise ConfigError("[data] n_test is 0; nothing to evaluate")
    out = dict(mode=ck.mode, n=len(test_set), fp32_accuracy=evaluate(ck.model, test_set))
    plan = QuantPlan.from_json(args.qparams) if args.qparams else ck.qplan
    if plan is not None:
        if ck.mode != "deploy":
            raise ConfigError("INT8 evaluation needs a fused (deploy) checkpoint")
        out["int8_accuracy"] = quantized_accuracy(ck.model, plan, test_set)
        out["drop"] = out["fp32_accuracy"] - out["int8_accuracy"]
    return out


def cmd_analyze(args) -> dict:
    ck = load_checkpoint(args.checkpoint)
    cfg = _resolve_config(args, ck)
    train_set, _ = run_datasets(cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    ext = args.format
    batch = train_set.images[:cfg.quant.calib_batch_size]
    written = {}

    def emit(kind, records, record_type):
        path = os.path.join(args.out_dir, f"{kind}.{ext}")
        export_report(records, path, ext, record_type)
        written[kind] = path

    emit("weights", weight_report(ck.model, fused=True), LayerReport)
    if ck.mode == "train":
        emit("weights_raw", weight_report(ck.model, fused=False), LayerReport)
    acts = activation_report(ck.model, batch)
    emit("activations", acts, type(acts[0]))
    deploy = ck.model if ck.mode == "deploy" else to_deploy(ck.model)
    plan = QuantPlan.from_json(args.qparams) if args.qparams else ck.qplan
    if plan is None:
        plan = calibrate(deploy, calibration_batches(cfg, train_set), cfg.quant.method, cfg.quant.bits)
    batches = calibration_batches(cfg, train_set)
    cum = cumulative_mse(deploy, plan, batches, activations_only=args.activations_only)
    emit("cumulative_mse", cum, type(cum[0]))
    loc = layer_mse(deploy, plan, batches)
    emit("layer_mse", loc, type(loc[0]))
    return dict(reports=written)


def cmd_lemma_check(args) -> dict:
    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint, expect_mode="train")
        net, cfg, steps = ck.model, _resolve_config(args, ck), 0
    else:
        cfg = _resolve_config(args)
        net, steps = build_network(cfg.network_spec(), cfg.run.seed), args.steps
    gap0 = network_lemma1_gap(net)
    if gap0 is None:
        raise ConfigError(f"variant {net.spec.variant} has no block with BN on both conv branches")
    gaps, scales = [gap0], [max_abs_beta(net)]
    if steps:
        train_set, _ = run_datasets(cfg)
        ocfg = cfg.optim_config()
        per_epoch = max(1, len(train_set) // ocfg.batch_size)
        ocfg = dataclasses.replace(ocfg, epochs=max(ocfg.epochs, -(-steps // per_epoch)))
        hist = train(net, train_set, ocfg, cfg.loss_mode(), max_steps=steps)
        gaps += hist.step_lemma1_gap
        scales += hist.step_beta_scale
    ratios = [g / (1 + s) for g, s in zip(gaps, scales)]
    return dict(variant=net.spec.variant, steps=len(gaps) - 1, max_gap=max(gaps), final_gap=gaps[-1],
                max_relative_gap=max(ratios))


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="repquant", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", help="train a network described by a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir", help="overrides [run] output_dir")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("fuse", help="convert a train checkpoint to deploy form")
    s.add_argument("checkpoint")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("calibrate", help="compute INT8 quantizer parameters as JSON")
    s.add_argument("checkpoint")
    s.add_argument("--config")
    s.add_argument("--method", choices=("max", "mse"))
    s.add_argument("--bits", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("quantize", help="attach quantizer parameters to a deploy checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--config")
    s.add_argument("--qparams", help="JSON from `calibrate`; calibrates from the config when omitted")
    s.add_argument("--method", choices=("max", "mse"))
    s.add_argument("--bits", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("eval", help="FP32 (and INT8 when quantized) test accuracy")
    s.add_argument("checkpoint")
    s.add_argument("--config")
    s.add_argument("--qparams")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("analyze", help="weight/activation reports and quantization MSE curves")
    s.add_argument("checkpoint")
    s.add_argument("--config")
    s.add_argument("--qparams")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--format", choices=("csv", "json"), default="csv")
    s.add_argument("--activations-only", action="store_true",
                   help="cumulative MSE switches only layer inputs to INT8")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("lemma-check", help="max |beta_3x3 - beta_1x1| over blocks")
    s.add_argument("--checkpoint")
    s.add_argument("--config")
    s.add_argument("--steps", type=int, default=0, help="train a fresh model this many SGD steps first")
    s.set_defaults(func=cmd_lemma_check)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        return _fail("UsageError", str(e), 2)
    try:
        result = args.func(args)
    except ConfigError as e:
        return _fail(type(e).__name__, str(e), 2)
    except (RepQuantError, OSError) as e:
        return _fail(type(e).__name__, str(e), 1)
    print(json.dumps(result, indent=1, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
