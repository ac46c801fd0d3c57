"""Command-line entry point: data synthesis, two-stage training, evaluation, FLOPs."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, split_from_dict
from .config import TrainConfig, load_config
from .data import SHAPES, SceneSpec, build_shapes_dataset, default_folds, load_dataset, save_dataset, \
    split_from_novel
from .encoder import Encoder, EncoderConfig
from .evaluate import evaluate, evaluate_generalized, plot_accuracy_vs_flops, plot_tau_sweep, \
    seed_summary, write_results
from .metrics import ResultsTable, format_flops, gram_flops
from .model import LEARNERS
from .train import meta_train, pretrain_base

log = logging.getLogger("bam_fss")

BENCHMARK_EPISODES = 1000
BENCHMARK_SEEDS = (0, 1, 2, 3, 4)


def _seeds(text: str) -> tuple:
    return tuple(int(s) for s in text.replace(",", " ").split())


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with a [bam] section; flags override it")
    p.add_argument("--data", required=True, help="dataset root written by synth-data")
    p.add_argument("--fold", type=int)
    p.add_argument("--shots", type=int)
    p.add_argument("--seeds", type=_seeds, help="comma separated seed list")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bam-fss", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="render a shapes-world dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=12)
    p.add_argument("--images", type=int, default=800)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--folds", type=int, default=4)
    p.add_argument("--size", type=int, default=64)

    p = sub.add_parser("pretrain-base", help="stage 1: encoder + base learner")
    _common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("meta-train", help="stage 2: meta learner + ensemble")
    _common(p)
    p.add_argument("--stage1", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--no-psi", action="store_true")
    p.add_argument("--no-ensemble-init", action="store_true",
                   help="random instead of (1, 0) ensemble initialization")
    p.add_argument("--no-ensemble", action="store_true",
                   help="train the meta learner alone on its own loss")
    p.add_argument("--gram-tap", choices=("b1", "b2", "b3", "b4"))
    p.add_argument("--kshot-fusion", choices=("reweight", "feature-avg", "mask-avg", "mask-or"))
    p.add_argument("--kshot-reweight-scope", choices=("all", "psi"))
    p.add_argument("--annotation", choices=("mask", "bbox"))

    for name, helptext in (("evaluate", "novel-class mIoU / FB-IoU"),
                           ("evaluate-generalized", "mIoU_n / mIoU_b / mIoU_a")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--episodes", type=int)
        p.add_argument("--annotation", choices=("mask", "bbox"))
        p.add_argument("--results", help="write a .json results file (and a .txt table)")
        p.add_argument("--benchmark-mode", action="store_true",
                       help=f"{BENCHMARK_EPISODES} episodes x {len(BENCHMARK_SEEDS)} seeds")
        if name == "evaluate":
            p.add_argument("--learner", choices=LEARNERS)
            p.add_argument("--kshot-fusion",
                           choices=("reweight", "feature-avg", "mask-avg", "mask-or"))
        else:
            p.add_argument("--tau", type=float, default=0.9)
            p.add_argument("--scheme", choices=("main", "alt"), default="main")
            p.add_argument("--baseline-ckpt",
                           help="model trained without the ensemble (same stage 1) for the "
                                "without-ensemble row; default: the checkpoint's own meta output")
            p.add_argument("--sweep", type=float, nargs="+",
                           help="thresholds for a tau sweep (curve file + plot)")

    p = sub.add_parser("flops", help="Gram / psi cost for each encoder tap")
    p.add_argument("--channels", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--size", type=int, default=64, help="input size for per-tap listing")
    p.add_argument("--results", help="optional .json with per-tap FLOPs (and mIoU to plot)")
    p.add_argument("--plot", help="accuracy-vs-FLOPs image; needs --miou")
    p.add_argument("--miou", type=float, nargs=4, metavar=("B1", "B2", "B3", "B4"))
    return parser


def _config(args) -> TrainConfig:
    base = load_config(getattr(args, "config", None))
    over = dict(fold=args.fold, shots=args.shots, seeds=args.seeds, lr=args.lr,
                epochs=args.epochs, batch_size=args.batch_size)
    for key, attr in (("lam", "lam"), ("gram_tap", "gram_tap"),
                      ("kshot_fusion", "kshot_fusion"), ("reweight_scope", "kshot_reweight_scope"),
                      ("annotation_mode", "annotation"), ("episodes", "episodes"),
                      ("learner", "learner")):
        over[key] = getattr(args, attr, None)
    if getattr(args, "no_psi", False):
        over["use_psi"] = False
    if getattr(args, "no_ensemble_init", False):
        over["ensemble_init"] = "random"
    if getattr(args, "no_ensemble", False):
        over["use_ensemble"] = False
    if getattr(args, "benchmark_mode", False):
        over["episodes"], over["seeds"] = BENCHMARK_EPISODES, BENCHMARK_SEEDS
    return base.override(**over)


def _load(args, config: TrainConfig):
    dataset, folds = load_dataset(args.data)
    num_folds = len(folds)
    split = split_from_novel(dataset.num_classes, config.fold, folds[config.fold], num_folds)
    return dataset, split


def _ckpt_split(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model, meta = load_checkpoint(path)
    return model, split_from_dict(meta["split"])


def cmd_synth(args) -> int:
    if not 1 <= args.classes <= len(SHAPES):
        raise SystemExit(f"--classes must be in 1..{len(SHAPES)}")
    spec = SceneSpec(canvas_size=args.size, shape_classes=SHAPES[:args.classes])
    ds = build_shapes_dataset(args.images, spec, seed=args.seed)
    save_dataset(ds, args.out, default_folds(args.classes, args.folds))
    print(f"wrote {len(ds)} images, {args.classes} classes, {args.folds} folds to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    config = _config(args).override(stage="pretrain")
    dataset, split = _load(args, config)
    result = pretrain_base(config, dataset, split, out_path=args.out)
    print(f"stage-1 loss {result.losses[0]:.4f} -> {result.losses[-1]:.4f}; saved {args.out}")
    return 0


def cmd_meta(args) -> int:
    config = _config(args).override(stage="meta")
    dataset, _ = _load(args, config)
    if not Path(args.stage1).exists():
        raise FileNotFoundError(f"checkpoint not found: {args.stage1}")
    result = meta_train(config, args.stage1, dataset, out_path=args.out, steps=args.steps)
    print(f"stage-2 loss {result.losses[0]:.4f} -> {result.losses[-1]:.4f}; "
          f"frozen hash {result.frozen_hash_after[:12]} unchanged; saved {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    config = _config(args)
    model, split = _ckpt_split(args.ckpt)
    dataset, _ = load_dataset(args.data)
    records = evaluate(config, None, dataset, model=model, split=split,
                       fusion=args.kshot_fusion)[config.learner]
    summary = seed_summary(records)
    table = ResultsTable("miou")
    table.add(config.learner, split.fold_index, summary["miou_mean"])
    print(table.to_text())
    for r in records:
        print(f"seed {r.seed}: mIoU {r.miou:.4f}  FB-IoU {r.fb_iou:.4f}")
    print(f"mean mIoU {summary['miou_mean']:.4f} +- {summary['miou_std']:.4f}  "
          f"FB-IoU {summary['fb_iou_mean']:.4f}")
    if args.results:
        write_results(args.results, table, {"summary": summary, "config": config.to_dict()})
    return 0


def cmd_generalized(args) -> int:
    config = _config(args)
    model, split = _ckpt_split(args.ckpt)
    dataset, _ = load_dataset(args.data)
    baseline = _ckpt_split(args.baseline_ckpt)[0] if args.baseline_ckpt else None
    out = evaluate_generalized(config, None, dataset, args.tau, args.scheme, model=model,
                               split=split, taus=args.sweep, baseline=baseline)
    table = ResultsTable("miou_n")
    for method, recs in out["records"].items():
        n, b, a = (float(np.mean([getattr(r, k) for r in recs]))
                   for k in ("miou_n", "miou_b", "miou_a"))
        table.add(method, split.fold_index, n)
        print(f"{method:22s} mIoU_n {n:.4f}  mIoU_b {b:.4f}  mIoU_a {a:.4f}")
    extra = {"records": {m: [r.to_dict() for r in v] for m, v in out["records"].items()},
             "tau": args.tau, "scheme": args.scheme}
    if "sweep" in out:
        extra["sweep"] = out["sweep"]
    if args.results:
        write_results(args.results, table, extra)
        if "sweep" in out:
            stem = Path(args.results).with_suffix("")
            Path(f"{stem}_tau_sweep.json").write_text(json.dumps(out["sweep"], indent=2))
            plot_tau_sweep(out["sweep"], f"{stem}_tau_sweep.png")
    return 0


def tap_shapes(size: int, config: EncoderConfig = EncoderConfig()) -> dict:
    with torch.no_grad():
        feats = Encoder(config)(torch.zeros(1, 3, size, size))
    return {name: tuple(getattr(feats, name).shape[1:]) for name in ("b1", "b2", "b3", "b4")}


def cmd_flops(args) -> int:
    if args.channels:
        n = gram_flops(args.channels, args.height or 1, args.width or 1)
        print(f"C={args.channels} H={args.height} W={args.width}: {n} ({format_flops(n)})")
        return 0
    rows = {}
    for tap, (c, h, w) in tap_shapes(args.size).items():
        rows[tap] = gram_flops(c, h, w)
        print(f"{tap.upper()}  {c}x{h}x{w}  {rows[tap]:>14d}  {format_flops(rows[tap])}")
    if args.results:
        Path(args.results).write_text(json.dumps(rows, indent=2))
    if args.plot:
        if not args.miou:
            raise SystemExit("--plot needs --miou B1 B2 B3 B4")
        plot_accuracy_vs_flops({t: (rows[t], m) for t, m in zip(rows, args.miou)}, args.plot)
    return 0


COMMANDS = {"synth-data": cmd_synth, "pretrain-base": cmd_pretrain, "meta-train": cmd_meta,
            "evaluate": cmd_evaluate, "evaluate-generalized": cmd_generalized,
            "flops": cmd_flops}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
