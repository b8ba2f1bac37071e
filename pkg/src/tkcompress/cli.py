"""Command-line surface.

Commands:
    ranks     print per-layer rank estimates for a saved model
    compress  factorize a saved model (manual ranks or --auto), optionally retrain
    train     phase-1 training from an architecture config; --pipeline runs
              the full compress pipeline (train, select, truncate, retrain)
    evaluate  Top-1 of a saved model on a dataset
    report    render a stored compression report

Exit codes: 0 success, 2 bad arguments, 3 I/O or format error,
4 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import metrics, modelio, trainer
from .data import DataFormatError, Dataset, SynthSpec, load_cifar10, synth_dataset
from .decomp import ConvLayerSpec, FactorizedConv
from .rank_select import RankPolicy
from .trainer import NumericError, TrainConfig

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _add_data_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--data", required=required, default=None,
                   help="dataset directory, or 'synth'")
    p.add_argument("--split", default="train", choices=["train", "test"])
    p.add_argument("--synth-samples", type=int, default=512)
    p.add_argument("--synth-classes", type=int, default=4)
    p.add_argument("--synth-size", type=int, default=8, help="synthetic image side length")
    p.add_argument("--synth-margin", type=float, default=8.0)
    p.add_argument("--synth-noise", type=float, default=0.02)


def _load_data(args, seed: int) -> Dataset:
    if args.data == "synth":
        spec = SynthSpec(
            samples=args.synth_samples,
            classes=args.synth_classes,
            height=args.synth_size,
            width=args.synth_size,
            margin=args.synth_margin,
            noise=args.synth_noise,
            split=args.split,
        )
        return synth_dataset(spec, seed=seed)
    return load_cifar10(args.data, split=args.split)


def _add_policy_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--policy", default="channel_ratio",
                   choices=["channel_ratio", "vbmf_independent"])
    p.add_argument("--min-rank", type=int, default=1)
    p.add_argument("--rank-cap", type=float, default=1.0,
                   help="cap VBMF ranks at ceil(fraction * mode size)")


def _policy(args) -> RankPolicy:
    return RankPolicy(r4_rule=args.policy, min_rank=args.min_rank,
                      rank_cap_fraction=args.rank_cap)


def _train_config(args) -> TrainConfig:
    cfg = {}
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    if "lr_schedule" in cfg:
        cfg["lr_schedule"] = tuple((int(t), float(r)) for t, r in cfg["lr_schedule"])
    for key, attr in (("rho", "rho"), ("lam", "lam")):
        v = getattr(args, attr, None)
        if v is not None:
            cfg[key] = v
    if getattr(args, "epochs", None) is not None:
        cfg["epochs_overparam"] = args.epochs
        cfg["epochs_lowrank"] = args.epochs
    if getattr(args, "keep_ortho_phase2", False):
        cfg["keep_ortho_phase2"] = True
    if args.seed is not None:
        cfg["seed"] = args.seed
    return TrainConfig(**cfg)


def _write_report(report: metrics.CompressionReport, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(metrics.report_to_dict(report), fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(metrics.render_report(report) + "\n")


def _print_rank_reports(reports) -> None:
    for rep in reports:
        top = ", ".join(f"{v:.4g}" for v in rep.singular_values[:6])
        print(
            f"{rep.layer_id:<16} rank={rep.estimated_rank:<4} "
            f"sigma2={rep.noise_sigma2:.4g}  s=[{top}{', ...' if rep.singular_values.size > 6 else ''}]"
        )


def _cmd_ranks(args) -> int:
    model = modelio.load_model(args.model)
    policy = _policy(args)
    ranks, reports = trainer.select_model_ranks(model, policy)
    _print_rank_reports(reports)
    for name, r in ranks.items():
        print(f"{name:<16} selected={r}")
    return EXIT_OK


def _cmd_compress(args) -> int:
    model = modelio.load_model(args.model)
    if args.auto:
        ranks, reports = trainer.select_model_ranks(model, _policy(args))
    else:
        if args.r3 is None or args.r4 is None:
            raise ValueError("either --auto or both --r3 and --r4 are required")
        ranks = {}
        reports = []
        for name, blk in zip(model.names, model.blocks):
            if isinstance(blk, (FactorizedConv, ConvLayerSpec)):
                ranks[name] = (args.r3, args.r4)
            elif args.fc_rank is not None:
                ranks[name] = args.fc_rank
    compressed = trainer.truncate_model(model, ranks)
    top1_before = top1_after = None
    if args.data is not None:
        data = _load_data(args, seed=args.seed or 0)
        cfg = _train_config(args)
        top1_before = trainer.evaluate(model, data)
        compressed, _ = trainer.retrain_lowrank(compressed, data, cfg)
        top1_after = trainer.evaluate(compressed, data)
    modelio.save_model(compressed, args.out)
    report = trainer.build_compression_report(compressed, top1_before, top1_after, reports)
    _write_report(report, args.out)
    print(metrics.render_report(report))
    return EXIT_OK


def _cmd_train(args) -> int:
    with open(args.arch, "r", encoding="utf-8") as fh:
        arch = trainer.Architecture.from_dict(json.load(fh))
    cfg = _train_config(args)
    data = _load_data(args, seed=cfg.seed + 1)
    if args.pipeline:
        model, report = trainer.compress_pipeline(arch, data, cfg, _policy(args))
        modelio.save_model(model, args.out)
        _write_report(report, args.out)
        print(metrics.render_report(report))
    else:
        model = trainer.init_model(arch, cfg.seed)
        model, history = trainer.train_overparam(model, data, cfg)
        modelio.save_model(model, args.out)
        print(f"final train loss: {history[-1]:.6f}" if history else "no epochs run")
        print(f"train top1: {trainer.evaluate(model, data):.2f}%")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    model = modelio.load_model(args.model)
    data = _load_data(args, seed=args.seed or 0)
    print(f"top1: {trainer.evaluate(model, data):.2f}%")
    return EXIT_OK


def _cmd_report(args) -> int:
    path = os.path.join(args.dir, "report.json")
    with open(path, "r", encoding="utf-8") as fh:
        report = metrics.report_from_dict(json.load(fh))
    print(metrics.render_report(report, shared_rank_formulas=args.paper_formula))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tkcompress", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--seed", type=int, default=None, help="seed for all randomness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ranks", help="estimate per-layer ranks of a saved model")
    p.add_argument("model", help="model directory")
    _add_policy_args(p)
    p.set_defaults(func=_cmd_ranks)

    p = sub.add_parser("compress", help="factorize a saved model")
    p.add_argument("model", help="model directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--auto", action="store_true", help="pick ranks automatically")
    p.add_argument("--r3", type=int, default=None)
    p.add_argument("--r4", type=int, default=None)
    p.add_argument("--fc-rank", type=int, default=None)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None, help="retraining epochs")
    p.add_argument("--config", default=None, help="training config JSON")
    _add_policy_args(p)
    _add_data_args(p, required=False)
    p.set_defaults(func=_cmd_compress)

    p = sub.add_parser("train", help="phase-1 training (or the full pipeline)")
    p.add_argument("arch", help="architecture config JSON")
    p.add_argument("--config", default=None, help="training config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--pipeline", action="store_true",
                   help="run the full compress pipeline after phase 1")
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--keep-ortho-phase2", action="store_true")
    _add_policy_args(p)
    _add_data_args(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="Top-1 accuracy of a saved model")
    p.add_argument("model", help="model directory")
    _add_data_args(p)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("report", help="render a stored compression report")
    p.add_argument("dir", help="directory holding report.json")
    p.add_argument("--paper-formula", action="store_true",
                   help="also show the shared-rank closed-form CR/SR columns")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, modelio.ModelFormatError, json.JSONDecodeError, DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
