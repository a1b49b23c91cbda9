"""Desk-scale ablation harnesses.

Two experiment grids: negative-queue-size sensitivity of the plain vs the
margin contrastive loss (probe accuracy per (margin, K, seed) cell), and
the four-arm pipeline comparison (supervised from scratch, probe on the
pretrained encoder, full fine-tune, fine-tune plus distillation).

Every cell is a real training run; an optional cache directory memoizes
finished runs by a hash of their full configuration plus a dataset
fingerprint, so repeated invocations do not redo hours of compute.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import statistics
from pathlib import Path

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import DatasetManifest
from .trainer import (
    Phase1Config,
    Phase2Config,
    evaluate_top1,
    finetune_phase2,
    linear_probe,
    pretrain_phase1,
    random_checkpoint,
)

log = logging.getLogger(__name__)


def manifest_fingerprint(manifest: DatasetManifest) -> str:
    """Content hash of a dataset: file names, labels and image bytes.

    Hashing the bytes matters: regenerated datasets can keep the same file
    layout with different pixels, and a name-only fingerprint would then
    serve stale cached runs.
    """
    h = hashlib.sha256()
    for path, cls in manifest.entries:
        h.update(f"{Path(path).name}:{cls}:".encode())
        h.update(Path(path).read_bytes())
        h.update(b"\n")
    h.update(",".join(manifest.class_names).encode())
    return h.hexdigest()[:16]


def _cache_key(kind: str, payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True).encode()
    return f"{kind}-{hashlib.sha256(blob).hexdigest()[:24]}"


def cached_pretrain(cfg: Phase1Config, manifest: DatasetManifest,
                    cache_dir: str | Path | None) -> Checkpoint:
    if cache_dir is None:
        return pretrain_phase1(cfg, manifest)
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    key = _cache_key("phase1", {"cfg": cfg.to_flat(),
                                "data": manifest_fingerprint(manifest)})
    path = cache_dir / f"{key}.ckpt"
    if path.exists():
        log.info("cache hit for %s", key)
        return load_checkpoint(path)
    log.info("pretraining %s (K=%d, m=%.2f, seed=%d)", key, cfg.queue_size,
             cfg.margin, cfg.seed)
    ckpt = pretrain_phase1(cfg, manifest)
    save_checkpoint(ckpt, path)
    return ckpt


def cached_finetune(cfg: Phase2Config, manifest: DatasetManifest, base: Checkpoint,
                    cache_dir: str | Path | None) -> Checkpoint:
    if cache_dir is None:
        return finetune_phase2(cfg, manifest, base)
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    key = _cache_key("phase2", {"cfg": cfg.to_flat(),
                                "base": base.config_hash(),
                                "base_digest": base.metric_digest,
                                "data": manifest_fingerprint(manifest)})
    path = cache_dir / f"{key}.ckpt"
    if path.exists():
        log.info("cache hit for %s", key)
        return load_checkpoint(path)
    log.info("fine-tuning %s (taps=%s, weight=%g, seed=%d)", key,
             ",".join(cfg.stage_taps) or "-", cfg.distill_weight, cfg.seed)
    ckpt = finetune_phase2(cfg, manifest, base)
    save_checkpoint(ckpt, path)
    return ckpt


def cached_probe(ckpt: Checkpoint, train_manifest: DatasetManifest,
                 val_manifest: DatasetManifest, probe_epochs: int,
                 cache_dir: str | Path | None, seed: int = 0) -> float:
    if cache_dir is None:
        return linear_probe(ckpt, train_manifest, val_manifest,
                            probe_epochs=probe_epochs, seed=seed)
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    key = _cache_key("probe", {"base": ckpt.config_hash(),
                               "base_digest": ckpt.metric_digest,
                               "epochs": probe_epochs, "seed": seed,
                               "train": manifest_fingerprint(train_manifest),
                               "val": manifest_fingerprint(val_manifest)})
    path = cache_dir / f"{key}.json"
    if path.exists():
        return json.loads(path.read_text())["top1"]
    acc = linear_probe(ckpt, train_manifest, val_manifest,
                       probe_epochs=probe_epochs, seed=seed)
    path.write_text(json.dumps({"top1": acc}))
    return acc


def write_results_csv(rows: list[dict], path: str | Path) -> None:
    if not rows:
        return
    fieldnames = list(rows[0].keys())
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def median_by(rows: list[dict], group_keys: tuple[str, ...], value_key: str) -> dict:
    groups: dict[tuple, list[float]] = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in group_keys), []).append(row[value_key])
    return {key: statistics.median(values) for key, values in groups.items()}


def ablate_negatives(
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest,
    base_cfg: Phase1Config,
    queue_sizes: tuple[int, ...] = (64, 256, 1024),
    margins: tuple[float, ...] = (0.0, 0.6),
    seeds: tuple[int, ...] = (0, 1, 2),
    probe_epochs: int = 100,
    cache_dir: str | Path | None = None,
) -> list[dict]:
    """Probe accuracy for each (margin, queue size, seed) cell.

    Mirrors the queue-size sensitivity comparison: the margin-loss rows
    should lose less accuracy than the plain-loss rows as K shrinks.
    """
    rows = []
    for margin in margins:
        for queue_size in queue_sizes:
            for seed in seeds:
                cfg = dataclasses.replace(
                    base_cfg, margin=margin, queue_size=queue_size, seed=seed
                )
                ckpt = cached_pretrain(cfg, train_manifest, cache_dir)
                acc = cached_probe(ckpt, train_manifest, val_manifest,
                                   probe_epochs, cache_dir)
                rows.append({
                    "variant": "margin" if margin > 0 else "plain",
                    "margin": margin,
                    "queue_size": queue_size,
                    "seed": seed,
                    "probe_top1": acc,
                })
                log.info("ablate-negatives m=%.2f K=%d seed=%d -> %.4f",
                         margin, queue_size, seed, acc)
    return rows


def negatives_sensitivity(rows: list[dict]) -> dict[float, float]:
    """Per margin: median probe-accuracy drop from the largest to the
    smallest queue size."""
    medians = median_by(rows, ("margin", "queue_size"), "probe_top1")
    margins = sorted({m for m, _ in medians})
    out = {}
    for margin in margins:
        sizes = sorted(k for m, k in medians if m == margin)
        out[margin] = medians[(margin, sizes[-1])] - medians[(margin, sizes[0])]
    return out


def ablate_pipeline(
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest,
    phase1_cfg: Phase1Config,
    phase2_cfg: Phase2Config,
    seeds: tuple[int, ...] = (0, 1, 2),
    probe_epochs: int = 100,
    cache_dir: str | Path | None = None,
) -> list[dict]:
    """Five-arm comparison per seed: random-init probe, supervised from
    scratch, pretrain+probe, pretrain+fine-tune, pretrain+fine-tune+distill."""
    plain_ft = dataclasses.replace(phase2_cfg, stage_taps=(), distill_weight=0.0)
    rows = []
    for seed in seeds:
        p1 = dataclasses.replace(phase1_cfg, seed=seed)
        p2 = dataclasses.replace(phase2_cfg, seed=seed)
        ft = dataclasses.replace(plain_ft, seed=seed)

        rand_ckpt = random_checkpoint(
            arch=p1.backbone, embedding_dim=p1.embedding_dim,
            seed=seed + 1000, crop_size=p1.crop_size,
        )
        phase1_ckpt = cached_pretrain(p1, train_manifest, cache_dir)

        arms = {
            "random_probe": lambda: cached_probe(
                rand_ckpt, train_manifest, val_manifest, probe_epochs, cache_dir),
            "supervised": lambda: evaluate_top1(
                cached_finetune(ft, train_manifest, rand_ckpt, cache_dir),
                val_manifest),
            "phase1_probe": lambda: cached_probe(
                phase1_ckpt, train_manifest, val_manifest, probe_epochs, cache_dir),
            "phase1_finetune": lambda: evaluate_top1(
                cached_finetune(ft, train_manifest, phase1_ckpt, cache_dir),
                val_manifest),
            "phase1_phase2": lambda: evaluate_top1(
                cached_finetune(p2, train_manifest, phase1_ckpt, cache_dir),
                val_manifest),
        }
        for arm, run in arms.items():
            acc = run()
            rows.append({"arm": arm, "seed": seed, "top1": acc})
            log.info("ablate-pipeline %s seed=%d -> %.4f", arm, seed, acc)
    return rows
