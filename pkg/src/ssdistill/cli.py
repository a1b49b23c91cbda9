"""Command-line entry point and experiment harness.

Every command resolves its configuration (defaults < config file < command
line), then writes the resolved config, metrics and checkpoints into a
self-describing run directory.  Exit codes: 0 success, 2 usage error,
3 dataset/IO error, 4 non-finite-loss abort, 1 anything else.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .ablate import (
    ablate_negatives,
    ablate_pipeline,
    negatives_sensitivity,
    median_by,
    write_results_csv,
)
from .checkpoint import load_checkpoint
from .config import dataclass_from_flat, format_flat, parse_flat_file, parse_override
from .data import load_manifest
from .toydata import make_synthetic_dataset
from .trainer import (
    NonFiniteLossError,
    Phase1Config,
    Phase2Config,
    evaluate_top1,
    finetune_phase2,
    linear_probe,
    pretrain_phase1,
)

log = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NONFINITE = 4

DATA_ROOT_ENV = "SSDISTILL_DATA_ROOT"


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data-root", default=None,
                        help=f"dataset root (fallback: ${DATA_ROOT_ENV})")
    parser.add_argument("--out-dir", default=None, help="run directory")
    parser.add_argument("--config", default=None, help="flat key=value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted-key config override")
    parser.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssdistill")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="phase-1 contrastive pre-training")
    _add_common(p)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--queue-size", type=int, default=None)
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--backbone", default=None)

    p = sub.add_parser("finetune", help="phase-2 self-distillation fine-tuning")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="phase-1 checkpoint file")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--distill-weight", type=float, default=None)
    p.add_argument("--stage-taps", default=None,
                   help="comma-separated stage names; empty string disables distillation")
    p.add_argument("--batch-size", type=int, default=None)

    p = sub.add_parser("probe", help="linear probe on a frozen encoder")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--probe-epochs", type=int, default=100)

    p = sub.add_parser("eval", help="top-1 accuracy of a phase-2 checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")

    p = sub.add_parser("ablate-negatives", help="queue-size sensitivity grid")
    _add_common(p)
    p.add_argument("--neg", default="64,256,1024",
                   help="comma-separated queue sizes")
    p.add_argument("--margins", default="0,0.6")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--probe-epochs", type=int, default=100)
    p.add_argument("--cache-dir", default=None)

    p = sub.add_parser("ablate-pipeline", help="four-arm pipeline comparison")
    _add_common(p)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--probe-epochs", type=int, default=100)
    p.add_argument("--cache-dir", default=None)

    p = sub.add_parser("make-toy-data", help="generate a synthetic desk-scale dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--val-per-class", type=int, default=10)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)

    return parser


def _data_root(args) -> Path:
    root = args.data_root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise FileNotFoundError(
            f"no dataset root: pass --data-root or set ${DATA_ROOT_ENV}"
        )
    return Path(root)


def _run_dir(args) -> Path:
    if args.out_dir:
        out = Path(args.out_dir)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        out = Path("runs") / f"{args.command}-{stamp}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve_config(args, cls, prefix: str, flag_map: dict[str, str]):
    """defaults < config file < explicit flags < --set overrides."""
    flat: dict[str, str] = {}
    if args.config:
        flat.update(parse_flat_file(args.config))
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            flat[f"{prefix}.{key}"] = str(value)
    if getattr(args, "seed", None) is not None:
        flat[f"{prefix}.seed"] = str(args.seed)
    for item in args.overrides:
        key, value = parse_override(item)
        flat[key] = value
    return dataclass_from_flat(cls, flat, prefix)


def _write_run_stamp(out: Path, config_dicts: dict[str, dict[str, str]]) -> None:
    lines = [f"version={__version__}"]
    for prefix, cfg in config_dicts.items():
        lines += [f"{prefix}.{k}={v}" for k, v in sorted(cfg.items())]
    (out / "config.txt").write_text("\n".join(lines) + "\n")


def _ints(csv_text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in csv_text.split(",") if v != "")


def _floats(csv_text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in csv_text.split(",") if v != "")


def _cmd_pretrain(args) -> int:
    cfg = _resolve_config(args, Phase1Config, "phase1", {
        "epochs": "epochs", "queue_size": "queue_size", "margin": "margin",
        "batch_size": "batch_size", "backbone": "backbone",
    })
    manifest = load_manifest(_data_root(args), "train")
    out = _run_dir(args)
    _write_run_stamp(out, {"phase1": cfg.to_flat()})
    pretrain_phase1(cfg, manifest, out_dir=out)
    print(f"phase-1 checkpoint written to {out / 'checkpoint.ckpt'}")
    return 0


def _cmd_finetune(args) -> int:
    cfg = _resolve_config(args, Phase2Config, "phase2", {
        "epochs": "epochs", "distill_weight": "distill_weight",
        "stage_taps": "stage_taps", "batch_size": "batch_size",
    })
    ckpt = load_checkpoint(args.checkpoint)
    root = _data_root(args)
    train_manifest = load_manifest(root, "train")
    try:
        val_manifest = load_manifest(root, "val")
    except FileNotFoundError:
        val_manifest = None
    out = _run_dir(args)
    _write_run_stamp(out, {"phase2": cfg.to_flat()})
    result = finetune_phase2(cfg, train_manifest, ckpt, out_dir=out,
                             val_manifest=val_manifest)
    if val_manifest is not None:
        acc = evaluate_top1(result, val_manifest)
        print(f"val top-1: {acc:.4f}")
    print(f"phase-2 checkpoint written to {out / 'checkpoint.ckpt'}")
    return 0


def _cmd_probe(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    root = _data_root(args)
    train_manifest = load_manifest(root, "train")
    val_manifest = load_manifest(root, "val")
    acc = linear_probe(ckpt, train_manifest, val_manifest,
                       probe_epochs=args.probe_epochs, seed=args.seed or 0)
    print(f"probe top-1: {acc:.4f}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    manifest = load_manifest(_data_root(args), args.split)
    acc = evaluate_top1(ckpt, manifest)
    print(f"top-1: {acc:.4f}")
    return 0


def _cmd_ablate_negatives(args) -> int:
    base = _resolve_config(args, Phase1Config, "phase1", {"epochs": "epochs"})
    root = _data_root(args)
    train_manifest = load_manifest(root, "train")
    val_manifest = load_manifest(root, "val")
    out = _run_dir(args)
    _write_run_stamp(out, {"phase1": base.to_flat()})
    rows = ablate_negatives(
        train_manifest, val_manifest, base,
        queue_sizes=_ints(args.neg), margins=_floats(args.margins),
        seeds=_ints(args.seeds), probe_epochs=args.probe_epochs,
        cache_dir=args.cache_dir,
    )
    write_results_csv(rows, out / "results.csv")
    for (margin, k), acc in sorted(median_by(rows, ("margin", "queue_size"),
                                             "probe_top1").items()):
        print(f"margin={margin:<4} K={k:<6} median probe top-1 = {acc:.4f}")
    for margin, drop in negatives_sensitivity(rows).items():
        print(f"margin={margin}: drop largest->smallest K = {drop:+.4f}")
    print(f"results written to {out / 'results.csv'}")
    return 0


def _cmd_ablate_pipeline(args) -> int:
    p1 = _resolve_config(args, Phase1Config, "phase1", {})
    p2 = _resolve_config(args, Phase2Config, "phase2", {})
    root = _data_root(args)
    train_manifest = load_manifest(root, "train")
    val_manifest = load_manifest(root, "val")
    out = _run_dir(args)
    _write_run_stamp(out, {"phase1": p1.to_flat(), "phase2": p2.to_flat()})
    rows = ablate_pipeline(
        train_manifest, val_manifest, p1, p2,
        seeds=_ints(args.seeds), probe_epochs=args.probe_epochs,
        cache_dir=args.cache_dir,
    )
    write_results_csv(rows, out / "results.csv")
    for (arm,), acc in median_by(rows, ("arm",), "top1").items():
        print(f"{arm:<16} median top-1 = {acc:.4f}")
    print(f"results written to {out / 'results.csv'}")
    return 0


def _cmd_make_toy_data(args) -> int:
    root = make_synthetic_dataset(
        args.out, classes=args.classes, train_per_class=args.per_class,
        val_per_class=args.val_per_class, size=args.size, seed=args.seed,
    )
    print(f"synthetic dataset written to {root}")
    return 0


_COMMANDS = {
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "probe": _cmd_probe,
    "eval": _cmd_eval,
    "ablate-negatives": _cmd_ablate_negatives,
    "ablate-pipeline": _cmd_ablate_pipeline,
    "make-toy-data": _cmd_make_toy_data,
}


def run(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
