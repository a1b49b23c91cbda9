"""Phase-1 pre-training, phase-2 self-distillation fine-tuning, linear-probe
evaluation and top-1 evaluation.

Determinism contract: with a fixed seed all randomness flows through either
``torch.manual_seed`` (model init) or per-sample generators (data order and
augmentation), so repeated runs reproduce the step-loss stream exactly.
One loop thread owns all mutable state; evaluation runs between epochs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import Checkpoint, load_module_arrays, module_arrays
from .data import (
    DatasetManifest,
    SupervisedEpochLoader,
    ContrastiveEpochLoader,
    eval_policy,
    sample_seed,
    supervised_policy,
    two_view_policy,
)
from .distiller import FeatureMapSet, StageConnector, distill_loss, freeze_teacher
from .encoder_state import (
    NegativeQueue,
    copy_into_key_encoder,
    momentum_update_modules,
)
from .losses import (
    ContrastiveBatch,
    ContrastiveLossConfig,
    Phase2LossConfig,
    combined_student_loss,
    cross_entropy_loss,
    margin_info_nce_loss,
)
from .models import LinearClassifier, ProjectionHead, build_backbone

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    """Raised when a training loss goes NaN/inf; carries a diagnostic dump."""

    def __init__(self, phase: str, epoch: int, step: int, lr: float,
                 components: dict[str, float]):
        self.phase = phase
        self.epoch = epoch
        self.step = step
        self.lr = lr
        self.components = components
        parts = ", ".join(f"{k}={v}" for k, v in components.items())
        super().__init__(
            f"non-finite loss in {phase} at epoch {epoch} step {step} (lr={lr}): {parts}"
        )


# ---------------------------------------------------------------------------
# Learning-rate schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StepDropSchedule:
    """Drop the rate by a fixed factor at each listed epoch."""

    base_lr: float
    drop_epochs: tuple[int, ...]
    factor: float = 0.1

    def at(self, epoch: int) -> float:
        drops = sum(1 for d in self.drop_epochs if d <= epoch)
        return self.base_lr * self.factor ** drops


@dataclass(frozen=True)
class IntervalDropSchedule:
    """Drop the rate by a fixed factor every ``every`` epochs."""

    base_lr: float
    every: int
    factor: float = 0.1

    def at(self, epoch: int) -> float:
        return self.base_lr * self.factor ** (epoch // self.every)


@dataclass(frozen=True)
class CosineSchedule:
    base_lr: float
    total_epochs: int

    def at(self, epoch: int) -> float:
        return 0.5 * self.base_lr * (1.0 + math.cos(math.pi * epoch / self.total_epochs))


def lr_at(schedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return schedule.at(epoch)


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Phase1Config:
    epochs: int = 800
    base_lr: float = 0.03
    lr_drop_epochs: tuple[int, ...] = (120, 160)
    lr_drop_factor: float = 0.1
    schedule: str = "step"                 # "step" | "cosine"
    momentum_coef: float = 0.999           # key-encoder momentum
    queue_size: int = 4096
    temperature: float = 0.2
    margin: float = 0.6
    batch_size: int = 64
    seed: int = 0
    embedding_dim: int = 128
    backbone: str = "small"
    crop_size: int = 32
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    queue_init: str = "random"             # "random" | "keys"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.queue_size < 1:
            raise ValueError("epochs, batch_size and queue_size must be positive")
        if not 0.0 <= self.momentum_coef <= 1.0:
            raise ValueError("momentum_coef must be in [0, 1]")
        if any(d >= self.epochs for d in self.lr_drop_epochs):
            log.warning(
                "lr drop epochs %s extend past the configured %d epochs; "
                "later drops never fire", self.lr_drop_epochs, self.epochs,
            )

    def lr_schedule(self):
        if self.schedule == "cosine":
            return CosineSchedule(self.base_lr, self.epochs)
        return StepDropSchedule(self.base_lr, self.lr_drop_epochs, self.lr_drop_factor)

    def to_flat(self) -> dict[str, str]:
        return _flatten_config(self)


@dataclass(frozen=True)
class Phase2Config:
    epochs: int = 100
    base_lr: float = 0.1
    lr_drop_every: int = 30
    lr_drop_factor: float = 0.1
    distill_weight: float = 1e-4
    stage_taps: tuple[str, ...] = ("stage1", "stage2", "stage3", "stage4")
    batch_size: int = 64
    seed: int = 0
    crop_size: int = 32
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    teacher_source: str = "query"          # "query" | "momentum"
    connector_norm: bool = True
    connector_init_std: float = 0.01

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr_drop_every < 1:
            raise ValueError("epochs, batch_size and lr_drop_every must be positive")
        if self.distill_weight < 0:
            raise ValueError("distill_weight must be >= 0")

    def lr_schedule(self):
        return IntervalDropSchedule(self.base_lr, self.lr_drop_every, self.lr_drop_factor)

    def to_flat(self) -> dict[str, str]:
        return _flatten_config(self)


def _flatten_config(cfg) -> dict[str, str]:
    out = {}
    for key, value in asdict(cfg).items():
        if isinstance(value, (tuple, list)):
            out[key] = ",".join(str(v) for v in value)
        else:
            out[key] = str(value)
    return out


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

class MetricsLogger:
    """JSON-lines metrics writer, one record per step or per epoch.

    Keeps a running digest of everything logged so a checkpoint can carry a
    fingerprint of its training history even without an output file.
    """

    def __init__(self, path: str | Path | None = None):
        self._file = open(path, "w", buffering=1) if path is not None else None
        self._hash = hashlib.sha256()

    def log(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True)
        self._hash.update(line.encode())
        if self._file is not None:
            self._file.write(line + "\n")

    def digest(self) -> str:
        return self._hash.hexdigest()

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None


# ---------------------------------------------------------------------------
# Model (re)construction helpers
# ---------------------------------------------------------------------------

def _build_encoder(arch: str, embedding_dim: int):
    backbone = build_backbone(arch)
    proj = ProjectionHead(backbone.feature_dim, embedding_dim)
    return backbone, proj

def backbone_from_checkpoint(ckpt: Checkpoint, source: str = "query"):
    """Rebuild the encoder trunk stored in a checkpoint.

    ``source`` picks the gradient-trained encoder ("query") or its momentum
    twin ("momentum") from a phase-1 checkpoint; phase-2 checkpoints store
    only the student trunk.
    """
    arch = ckpt.config.get("backbone", "small")
    backbone = build_backbone(arch)
    if ckpt.phase == "phase2":
        arrays = ckpt.subset("student.backbone")
    elif source == "momentum":
        arrays = ckpt.subset("encoder_k.backbone")
    else:
        arrays = ckpt.subset("encoder_q.backbone")
    if not arrays:
        raise ValueError(f"checkpoint has no '{source}' encoder tensors")
    load_module_arrays(backbone, arrays)
    return backbone


def random_checkpoint(arch: str = "small", embedding_dim: int = 128,
                      seed: int = 0, crop_size: int = 32) -> Checkpoint:
    """Randomly initialized encoder packaged as a phase-1-shaped checkpoint.

    Baseline arms (supervised-from-scratch, random-init probe) start here so
    they flow through exactly the same fine-tune / probe code paths.
    """
    torch.manual_seed(seed)
    backbone, proj = _build_encoder(arch, embedding_dim)
    tensors = {}
    tensors.update(module_arrays(backbone, "encoder_q.backbone"))
    tensors.update(module_arrays(proj, "encoder_q.proj"))
    config = {"backbone": arch, "embedding_dim": str(embedding_dim),
              "crop_size": str(crop_size), "seed": str(seed), "init": "random"}
    return Checkpoint(phase="phase1", epoch=0, config=config, tensors=tensors)


# ---------------------------------------------------------------------------
# Phase 1
# ---------------------------------------------------------------------------

def pretrain_phase1(cfg: Phase1Config, manifest: DatasetManifest,
                    out_dir: str | Path | None = None) -> Checkpoint:
    """Contrastive pre-training with the margin loss, momentum key encoder
    and FIFO negative queue.  Consumes images only, never labels."""
    image_paths = manifest.image_paths()
    if not image_paths:
        raise ValueError("manifest has no images")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    backbone_q, proj_q = _build_encoder(cfg.backbone, cfg.embedding_dim)
    backbone_k, proj_k = _build_encoder(cfg.backbone, cfg.embedding_dim)
    copy_into_key_encoder(backbone_q, backbone_k)
    copy_into_key_encoder(proj_q, proj_k)

    mean, std = manifest.channel_stats()
    policy = two_view_policy(cfg.crop_size, mean=mean, std=std)
    loader = ContrastiveEpochLoader(image_paths, policy, cfg.batch_size, cfg.seed)

    queue = _init_queue(cfg, backbone_k, proj_k, loader)

    loss_cfg = ContrastiveLossConfig(cfg.temperature, cfg.margin)
    schedule = cfg.lr_schedule()
    params = list(backbone_q.parameters()) + list(proj_q.parameters())
    opt = torch.optim.SGD(params, lr=cfg.base_lr, momentum=cfg.sgd_momentum,
                          weight_decay=cfg.weight_decay)
    metrics = MetricsLogger(out_dir / "metrics.jsonl" if out_dir else None)

    backbone_q.train(); proj_q.train()
    backbone_k.train(); proj_k.train()
    step = 0
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at(schedule, epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            for v1, v2 in loader.epoch(epoch):
                q = F.normalize(proj_q(backbone_q(v1)), dim=1)
                with torch.no_grad():
                    momentum_update_modules(backbone_q, backbone_k, cfg.momentum_coef)
                    momentum_update_modules(proj_q, proj_k, cfg.momentum_coef)
                    k = F.normalize(proj_k(backbone_k(v2)), dim=1)
                loss = margin_info_nce_loss(
                    ContrastiveBatch(q, k, queue.snapshot()), loss_cfg
                )
                if not torch.isfinite(loss):
                    raise NonFiniteLossError(
                        "phase1", epoch, step, lr,
                        {"loss_contrastive": float(loss.item())},
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                queue.enqueue(k)
                metrics.log({
                    "phase": "phase1", "epoch": epoch, "step": step, "lr": lr,
                    "loss_total": float(loss.item()),
                    "loss_contrastive": float(loss.item()),
                })
                step += 1
    finally:
        metrics.close()

    tensors = {}
    tensors.update(module_arrays(backbone_q, "encoder_q.backbone"))
    tensors.update(module_arrays(proj_q, "encoder_q.proj"))
    tensors.update(module_arrays(backbone_k, "encoder_k.backbone"))
    tensors.update(module_arrays(proj_k, "encoder_k.proj"))
    tensors["queue.buffer"] = queue.snapshot().numpy()
    ckpt = Checkpoint(
        phase="phase1",
        epoch=cfg.epochs,
        config=cfg.to_flat(),
        tensors=tensors,
        metric_digest=metrics.digest(),
    )
    if out_dir is not None:
        from .checkpoint import save_checkpoint
        save_checkpoint(ckpt, out_dir / "checkpoint.ckpt")
    return ckpt


def _init_queue(cfg: Phase1Config, backbone_k, proj_k,
                loader: ContrastiveEpochLoader) -> NegativeQueue:
    if cfg.queue_init == "random":
        g = torch.Generator().manual_seed(sample_seed(cfg.seed, 0, -3))
        return NegativeQueue.random_filled(cfg.queue_size, cfg.embedding_dim, g)
    if cfg.queue_init == "keys":
        queue = NegativeQueue(cfg.queue_size, cfg.embedding_dim)

        def key_stream():
            # Cycle warm-up epochs (negative indices keep their augmentation
            # seeds distinct from training epochs) until K keys accumulated.
            warm_epoch = -1
            while True:
                with torch.no_grad():
                    for _, v2 in loader.epoch(warm_epoch):
                        yield F.normalize(proj_k(backbone_k(v2)), dim=1)
                        if queue.count >= cfg.queue_size:
                            return
                warm_epoch -= 1

        return queue.warm_start(key_stream())
    raise ValueError(f"unknown queue_init '{cfg.queue_init}'")


# ---------------------------------------------------------------------------
# Phase 2
# ---------------------------------------------------------------------------

def finetune_phase2(cfg: Phase2Config, manifest: DatasetManifest, ckpt: Checkpoint,
                    out_dir: str | Path | None = None,
                    val_manifest: DatasetManifest | None = None) -> Checkpoint:
    """Supervised fine-tuning of a student initialized from the phase-1
    encoder, regularized by feature distillation from a frozen copy of the
    same encoder.  With an empty ``stage_taps`` this is plain fine-tuning."""
    if not manifest.entries:
        raise ValueError("manifest has no labeled entries")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    num_classes = manifest.class_count
    torch.manual_seed(cfg.seed)
    student = backbone_from_checkpoint(ckpt, source=cfg.teacher_source)
    classifier = LinearClassifier(student.feature_dim, num_classes)

    use_distill = bool(cfg.stage_taps)
    teacher = None
    connectors = nn.ModuleDict()
    if use_distill:
        for stage in cfg.stage_taps:
            if stage not in student.stage_channels:
                raise ValueError(
                    f"stage tap '{stage}' not in backbone stages "
                    f"{sorted(student.stage_channels)}"
                )
        teacher = freeze_teacher(backbone_from_checkpoint(ckpt, source=cfg.teacher_source))
        conn_gen = torch.Generator().manual_seed(sample_seed(cfg.seed, 0, -2))
        for stage in cfg.stage_taps:
            ch = student.stage_channels[stage]
            connectors[stage] = StageConnector(
                ch, ch, normalize=cfg.connector_norm,
                init_std=cfg.connector_init_std, generator=conn_gen,
            )

    mean, std = manifest.channel_stats()
    policy = supervised_policy(cfg.crop_size, mean=mean, std=std)
    loader = SupervisedEpochLoader(manifest.entries, policy, cfg.batch_size, cfg.seed)

    loss_cfg = Phase2LossConfig(cfg.distill_weight)
    schedule = cfg.lr_schedule()
    params = (list(student.parameters()) + list(classifier.parameters())
              + list(connectors.parameters()))
    opt = torch.optim.SGD(params, lr=cfg.base_lr, momentum=cfg.sgd_momentum,
                          weight_decay=cfg.weight_decay)
    metrics = MetricsLogger(out_dir / "metrics.jsonl" if out_dir else None)

    step = 0
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at(schedule, epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            student.train(); classifier.train(); connectors.train()
            correct = total = 0
            for images, labels in loader.epoch(epoch):
                pooled, taps_s = student.forward_stages(images)
                logits = classifier(pooled)
                ce = cross_entropy_loss(logits, labels)
                if use_distill:
                    with torch.no_grad():
                        _, taps_t = teacher.forward_stages(images)
                    features = FeatureMapSet(
                        [(taps_t[s], taps_s[s]) for s in cfg.stage_taps]
                    )
                    conns = [connectors[s] for s in cfg.stage_taps]
                    if cfg.distill_weight > 0:
                        dst = distill_loss(features, conns)
                    else:
                        with torch.no_grad():
                            dst = distill_loss(features, conns)
                else:
                    dst = torch.zeros(())
                loss = combined_student_loss(ce, dst, loss_cfg)
                if not torch.isfinite(loss):
                    raise NonFiniteLossError(
                        "phase2", epoch, step, lr,
                        {"loss_ce": float(ce.item()), "loss_distill": float(dst.item())},
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                with torch.no_grad():
                    correct += int((logits.argmax(dim=1) == labels).sum().item())
                    total += int(labels.numel())
                metrics.log({
                    "phase": "phase2", "epoch": epoch, "step": step, "lr": lr,
                    "loss_total": float(loss.item()),
                    "loss_ce": float(ce.item()),
                    "loss_distill": float(dst.item()),
                })
                step += 1
            epoch_record = {"phase": "phase2", "epoch": epoch,
                            "top1": correct / max(1, total)}
            if val_manifest is not None:
                epoch_record["val_top1"] = _accuracy(
                    student, classifier, val_manifest, cfg.crop_size
                )
                student.train(); classifier.train()
            metrics.log(epoch_record)
    finally:
        metrics.close()

    tensors = {}
    tensors.update(module_arrays(student, "student.backbone"))
    tensors.update(module_arrays(classifier, "student.classifier"))
    if use_distill:
        tensors.update(module_arrays(connectors, "connectors"))
    config = dict(cfg.to_flat())
    config["backbone"] = ckpt.config.get("backbone", "small")
    config["class_count"] = str(num_classes)
    result = Checkpoint(
        phase="phase2",
        epoch=cfg.epochs,
        config=config,
        tensors=tensors,
        metric_digest=metrics.digest(),
    )
    if out_dir is not None:
        from .checkpoint import save_checkpoint
        save_checkpoint(result, out_dir / "checkpoint.ckpt")
    return result


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _extract_features(backbone, manifest: DatasetManifest, crop_size: int):
    backbone.eval()
    mean, std = manifest.channel_stats()
    loader = SupervisedEpochLoader(
        manifest.entries, eval_policy(crop_size, mean=mean, std=std),
        batch_size=128, seed=0,
    )
    feats, labels = [], []
    with torch.no_grad():
        for images, y in loader.eval_batches():
            feats.append(backbone(images))
            labels.append(y)
    return torch.cat(feats), torch.cat(labels)


def linear_probe(ckpt: Checkpoint, train_manifest: DatasetManifest,
                 val_manifest: DatasetManifest, probe_epochs: int = 100,
                 lr: float = 0.3, batch_size: int = 128, seed: int = 0,
                 crop_size: int | None = None) -> float:
    """Train a single affine classifier on frozen backbone features; returns
    validation top-1 accuracy in [0, 1]."""
    if crop_size is None:
        crop_size = int(ckpt.config.get("crop_size", "32"))
    backbone = freeze_teacher(backbone_from_checkpoint(ckpt))
    train_x, train_y = _extract_features(backbone, train_manifest, crop_size)
    val_x, val_y = _extract_features(backbone, val_manifest, crop_size)

    head = LinearClassifier(train_x.shape[1], train_manifest.class_count)
    opt = torch.optim.SGD(head.parameters(), lr=lr, momentum=0.9)
    schedule = CosineSchedule(lr, probe_epochs)
    g = torch.Generator().manual_seed(seed)
    n = train_x.shape[0]
    for epoch in range(probe_epochs):
        epoch_lr = lr_at(schedule, epoch)
        for group in opt.param_groups:
            group["lr"] = epoch_lr
        order = torch.randperm(n, generator=g)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss = cross_entropy_loss(head(train_x[idx]), train_y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    with torch.no_grad():
        pred = head(val_x).argmax(dim=1)
    return float((pred == val_y).float().mean().item())


def _accuracy(backbone, classifier, manifest: DatasetManifest, crop_size: int) -> float:
    backbone.eval(); classifier.eval()
    feats, labels = _extract_features(backbone, manifest, crop_size)
    with torch.no_grad():
        pred = classifier(feats).argmax(dim=1)
    return float((pred == labels).float().mean().item())


def evaluate_top1(ckpt: Checkpoint, manifest: DatasetManifest,
                  crop_size: int | None = None) -> float:
    """Deterministic validation accuracy of a phase-2 checkpoint."""
    head_arrays = ckpt.subset("student.classifier")
    if not head_arrays:
        raise ValueError("checkpoint has no classifier head; run phase-2 or a probe first")
    if crop_size is None:
        crop_size = int(ckpt.config.get("crop_size", "32"))
    backbone = backbone_from_checkpoint(ckpt)
    num_classes = int(ckpt.config.get("class_count", manifest.class_count))
    classifier = LinearClassifier(backbone.feature_dim, num_classes)
    load_module_arrays(classifier, head_arrays)
    return _accuracy(backbone, classifier, manifest, crop_size)
