"""Command-line entry point for the full pipeline.

Precedence for every option: explicit flag > config file (--config, JSON)
> built-in default. Every run prints its resolved config (stderr), writes
artifacts under --out with fixed names, and exits 0 on success, 1 on a
runtime failure, 2 on a usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import training as tr
from .alignment import build_mask, proportional_alignment, render_mask
from .checkpoint import load_checkpoint
from .data import detokenize, generate_corpus, load_manifest
from .metrics import wer as wer_metric
from .models import (load_acoustic, load_fused, load_lm, save_acoustic,
                     save_fused, save_lm, FusedModel, FusionLayer)
from . import plots


class UsageError(Exception):
    pass


def _resolve(args, config, key, default):
    val = getattr(args, key, None)
    if val is not None:
        return val
    if key in config:
        return config[key]
    return default


def _load_config(args):
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            cfg = json.load(fh)
        if not isinstance(cfg, dict):
            raise UsageError(f"config file {args.config} must hold a JSON object")
        return cfg
    return {}


def _echo(resolved: dict):
    print("resolved config: " + json.dumps(resolved, sort_keys=True), file=sys.stderr)


def _out_dir(resolved) -> Path:
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_report(out: Path, report: dict):
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)


def _write_losses(out: Path, losses):
    with open(out / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, loss in enumerate(losses, start=1):
            w.writerow([i, f"{loss:.6f}"])
    plots.loss_curve(losses, out / "loss_curve.png")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    config = _load_config(args)
    resolved = {
        "n": _resolve(args, config, "n", 2000),
        "seed": _resolve(args, config, "seed", 0),
        "sigma": _resolve(args, config, "sigma", 0.1),
        "out": _resolve(args, config, "out", None),
    }
    if resolved["out"] is None:
        raise UsageError("gen-data requires --out")
    _echo(resolved)
    generate_corpus(int(resolved["n"]), int(resolved["seed"]),
                    float(resolved["sigma"]), resolved["out"])
    return 0


def _train_common(args, stage, extra_defaults=None):
    config = _load_config(args)
    defaults = {"epochs": 10, "batch_size": 32, "lr": 3e-4, "lr_decay": 1.0,
                "seed": 0, "data": None, "out": None}
    defaults.update(extra_defaults or {})
    resolved = {k: _resolve(args, config, k, v) for k, v in defaults.items()}
    resolved["stage"] = stage
    if resolved["data"] is None or resolved["out"] is None:
        raise UsageError(f"{stage} training requires --data and --out")
    _echo(resolved)
    return resolved


def cmd_pretrain_acoustic(args):
    resolved = _train_common(args, "acoustic")
    manifest = load_manifest(resolved["data"])
    cfg = tr.TrainConfig(stage="acoustic", epochs=int(resolved["epochs"]),
                         batch_size=int(resolved["batch_size"]),
                         lr=float(resolved["lr"]),
                         lr_decay=float(resolved["lr_decay"]),
                         seed=int(resolved["seed"]))
    model, report = tr.train_acoustic(cfg, manifest)
    out = _out_dir(resolved)
    save_acoustic(out / "checkpoint.voxk", model)
    _write_report(out, report)
    _write_losses(out, report["epoch_losses"])
    return 0


def cmd_pretrain_lm(args):
    resolved = _train_common(args, "lm")
    manifest = load_manifest(resolved["data"])
    cfg = tr.TrainConfig(stage="lm", epochs=int(resolved["epochs"]),
                         batch_size=int(resolved["batch_size"]),
                         lr=float(resolved["lr"]),
                         lr_decay=float(resolved["lr_decay"]),
                         seed=int(resolved["seed"]))
    model, report = tr.train_lm(cfg, manifest)
    out = _out_dir(resolved)
    save_lm(out / "checkpoint.voxk", model)
    _write_report(out, report)
    _write_losses(out, report["epoch_losses"])
    return 0


def cmd_train_fusion(args):
    resolved = _train_common(args, "fusion", {
        "lr": 1e-4, "acoustic_ckpt": None, "lm_ckpt": None, "injection": 3,
        "mode": "causal", "rank": 8, "alpha": 16.0, "dropout": 0.1,
    })
    if resolved["acoustic_ckpt"] is None:
        raise UsageError("train-fusion requires --acoustic-ckpt")
    if resolved["lm_ckpt"] is None:
        raise UsageError("train-fusion requires --lm-ckpt")
    manifest = load_manifest(resolved["data"])
    acoustic = load_acoustic(resolved["acoustic_ckpt"])
    lm = load_lm(resolved["lm_ckpt"])
    cfg = tr.TrainConfig(stage="fusion", epochs=int(resolved["epochs"]),
                         batch_size=int(resolved["batch_size"]),
                         lr=float(resolved["lr"]),
                         lr_decay=float(resolved["lr_decay"]),
                         seed=int(resolved["seed"]),
                         injection=int(resolved["injection"]),
                         fusion_mode=resolved["mode"],
                         adapter_r=int(resolved["rank"]),
                         adapter_alpha=float(resolved["alpha"]),
                         adapter_dropout=float(resolved["dropout"]))
    fused, report = tr.train_fusion(cfg, manifest, acoustic, lm)
    out = _out_dir(resolved)
    save_fused(out / "checkpoint.voxk", fused,
               meta={"alpha": cfg.adapter_alpha, "dropout": cfg.adapter_dropout})
    _write_report(out, report)
    _write_losses(out, report["epoch_losses"])
    return 0


def _load_eval_model(ckpt_path) -> FusedModel:
    _, meta = load_checkpoint(ckpt_path)
    kind = int(meta.get("kind", 0))
    if kind == 3:
        return load_fused(ckpt_path)
    if kind == 2:
        lm = load_lm(ckpt_path)
        from .models import AcousticModel
        dummy = AcousticModel()
        dummy.freeze()
        return FusedModel(dummy, lm, FusionLayer(), injection=1, mode="causal")
    raise UsageError(f"checkpoint {ckpt_path} is not an LM or fused checkpoint")


def cmd_eval(args):
    config = _load_config(args)
    resolved = {
        "ckpt": _resolve(args, config, "ckpt", None),
        "data": _resolve(args, config, "data", None),
        "out": _resolve(args, config, "out", None),
        "mode": _resolve(args, config, "mode", "streaming"),
        "limit": _resolve(args, config, "limit", None),
    }
    if resolved["ckpt"] is None or resolved["data"] is None or resolved["out"] is None:
        raise UsageError("eval requires --ckpt, --data and --out")
    if resolved["mode"] not in ("streaming", "offline", "offline-causal", "none"):
        raise UsageError(f"eval: unknown mode {resolved['mode']!r}")
    _echo(resolved)
    model = _load_eval_model(resolved["ckpt"])
    manifest = load_manifest(resolved["data"])
    limit = None if resolved["limit"] is None else int(resolved["limit"])
    pooled, rows = tr.evaluate_wer(model, manifest, resolved["mode"], limit=limit)
    out = _out_dir(resolved)
    per_sample = []
    with open(out / "hyps.txt", "w", encoding="utf-8") as fh, \
            open(out / "wer_summary.csv", "w", newline="") as csvfh:
        w = csv.writer(csvfh)
        w.writerow(["id", "ref", "hyp", "wer", "truncated"])
        for sid, ref, hyp_tokens, truncated in rows:
            hyp = detokenize(hyp_tokens)
            sample_wer = wer_metric(ref, hyp)
            per_sample.append(sample_wer)
            fh.write(f"{sid}\t{hyp}\n")
            w.writerow([sid, ref, hyp, f"{sample_wer:.4f}", int(truncated)])
    plots.wer_hist(per_sample, out / "wer_hist.png",
                   title=f"per-utterance WER ({resolved['mode']})")
    _write_report(out, {"mode": resolved["mode"], "wer": pooled,
                        "n": len(rows), "ckpt": str(resolved["ckpt"])})
    print(f"wer={pooled:.4f} n={len(rows)} mode={resolved['mode']}")
    return 0


def cmd_analyze_cca(args):
    config = _load_config(args)
    resolved = {
        "ckpt": _resolve(args, config, "ckpt", None),
        "data": _resolve(args, config, "data", None),
        "out": _resolve(args, config, "out", None),
        "components": _resolve(args, config, "components", 16),
        "lam": _resolve(args, config, "lam", 1e-4),
        "limit": _resolve(args, config, "limit", None),
        "min_samples": _resolve(args, config, "min_samples", 500),
    }
    if resolved["ckpt"] is None or resolved["data"] is None or resolved["out"] is None:
        raise UsageError("analyze-cca requires --ckpt, --data and --out")
    _echo(resolved)
    model = load_fused(resolved["ckpt"])
    manifest = load_manifest(resolved["data"])
    limit = None if resolved["limit"] is None else int(resolved["limit"])
    kwargs = dict(components=int(resolved["components"]), lam=float(resolved["lam"]),
                  min_samples=int(resolved["min_samples"]), limit=limit)
    base = tr.alignment_report(model, manifest, use_fusion=False, **kwargs)
    fused = tr.alignment_report(model, manifest, use_fusion=True, **kwargs)
    out = _out_dir(resolved)
    with open(out / "cca_layers.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "base_mean_corr", "fused_mean_corr"])
        for b, f in zip(base["layers"], fused["layers"]):
            w.writerow([b["layer"], f"{b['mean_corr']:.6f}", f"{f['mean_corr']:.6f}"])
    plots.cca_layers([base, fused], out / "cca_layers.png")
    _write_report(out, {"base": base, "fused": fused})
    return 0


def cmd_dump_mask(args):
    config = _load_config(args)
    resolved = {
        "text_len": _resolve(args, config, "text_len", None),
        "audio_len": _resolve(args, config, "audio_len", None),
        "mode": _resolve(args, config, "mode", "causal"),
    }
    if resolved["text_len"] is None or resolved["audio_len"] is None:
        raise UsageError("dump-mask requires --text-len and --audio-len")
    if resolved["mode"] not in ("causal", "full"):
        raise UsageError(f"dump-mask: unknown mode {resolved['mode']!r}")
    _echo(resolved)
    align = proportional_alignment(int(resolved["text_len"]), int(resolved["audio_len"]))
    mask = build_mask(align, resolved["mode"])
    print(render_mask(mask))
    return 0


# ---------------------------------------------------------------------------
# parser / dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxfuse",
        description="Toy continuous-space audio/text fusion pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("gen-data", help="generate a synthetic paired corpus")
    common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    for name, func in (("pretrain-acoustic", cmd_pretrain_acoustic),
                       ("pretrain-lm", cmd_pretrain_lm)):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} stage")
        common(p)
        p.add_argument("--data")
        p.add_argument("--out")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--lr-decay", dest="lr_decay", type=float)
        p.set_defaults(func=func)

    p = sub.add_parser("train-fusion", help="fine-tune fusion against frozen acoustic model")
    common(p)
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-decay", dest="lr_decay", type=float)
    p.add_argument("--acoustic-ckpt", dest="acoustic_ckpt")
    p.add_argument("--lm-ckpt", dest="lm_ckpt")
    p.add_argument("--injection", type=int)
    p.add_argument("--mode", choices=["causal", "full"])
    p.add_argument("--rank", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--dropout", type=float)
    p.set_defaults(func=cmd_train_fusion)

    p = sub.add_parser("eval", help="decode a corpus and report WER")
    common(p)
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--mode", choices=["streaming", "offline", "offline-causal", "none"])
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze-cca", help="layer-wise cross-modal correlation report")
    common(p)
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--components", type=int)
    p.add_argument("--lam", type=float)
    p.add_argument("--limit", type=int)
    p.add_argument("--min-samples", dest="min_samples", type=int)
    p.set_defaults(func=cmd_analyze_cca)

    p = sub.add_parser("dump-mask", help="print an alignment mask as 0/- rows")
    common(p)
    p.add_argument("--text-len", dest="text_len", type=int)
    p.add_argument("--audio-len", dest="audio_len", type=int)
    p.add_argument("--mode", choices=["causal", "full"])
    p.set_defaults(func=cmd_dump_mask)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, IOError, ValueError, KeyError, tr.TrainingError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
