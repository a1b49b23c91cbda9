"""Scalar training objectives.

All losses are plain differentiable functions of torch tensors; they hold
no state and are safe to call from any thread.  Softmax-style expressions
go through ``F.cross_entropy`` / ``log_softmax``, which subtract the row
max internally, so no logit magnitude can overflow.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

UNIT_NORM_TOL = 1e-5


@dataclass(frozen=True)
class ContrastiveLossConfig:
    """Temperature and margin for the contrastive losses.

    The margin must stay below 1: cosine similarities live in [-1, 1], so
    a margin of 1 or more would make the positive logit unconditionally
    negative.
    """

    temperature: float = 0.2
    margin: float = 0.6

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.margin < 1.0:
            raise ValueError(f"margin must be in [0, 1), got {self.margin}")


@dataclass(frozen=True)
class Phase2LossConfig:
    """Weight of the distillation term in the student loss."""

    distill_weight: float = 1e-4

    def __post_init__(self):
        if self.distill_weight < 0:
            raise ValueError(f"distill_weight must be >= 0, got {self.distill_weight}")


def _check_unit_rows(name: str, x: torch.Tensor) -> None:
    norms = x.norm(dim=1)
    bad = (norms - 1.0).abs() > UNIT_NORM_TOL
    if bad.any():
        worst = (norms - 1.0).abs().max().item()
        raise ValueError(f"{name} rows must be unit-norm (max deviation {worst:.2e})")


@dataclass
class ContrastiveBatch:
    """One contrastive step: queries, their positive keys, shared negatives.

    ``queries`` and ``positives`` are [B, D] with matching rows forming the
    positive pairs; ``negatives`` is [N, D] and is shared by every query
    (one queue snapshot per step).  All rows must be unit-norm.
    """

    queries: torch.Tensor
    positives: torch.Tensor
    negatives: torch.Tensor

    def __post_init__(self):
        q, pos, neg = self.queries, self.positives, self.negatives
        if q.ndim != 2 or pos.ndim != 2 or neg.ndim != 2:
            raise ValueError("queries, positives and negatives must be 2-D")
        if q.shape != pos.shape:
            raise ValueError(f"queries {tuple(q.shape)} vs positives {tuple(pos.shape)}")
        if neg.shape[1] != q.shape[1]:
            raise ValueError(
                f"negatives dim {neg.shape[1]} does not match queries dim {q.shape[1]}"
            )
        if q.shape[0] < 1 or neg.shape[0] < 1 or q.shape[1] < 2:
            raise ValueError("need B >= 1, N >= 1 and D >= 2")
        _check_unit_rows("queries", q)
        _check_unit_rows("positives", pos)
        _check_unit_rows("negatives", neg)


def _contrastive_loss(batch: ContrastiveBatch, temperature: float, margin: float) -> torch.Tensor:
    q, pos, neg = batch.queries, batch.positives, batch.negatives
    l_pos = (q * pos).sum(dim=1, keepdim=True) - margin          # [B, 1]
    l_neg = q @ neg.t()                                          # [B, N]
    logits = torch.cat([l_pos, l_neg], dim=1) / temperature
    targets = torch.zeros(q.shape[0], dtype=torch.long, device=q.device)
    return F.cross_entropy(logits, targets)


def info_nce_loss(batch: ContrastiveBatch, cfg: ContrastiveLossConfig) -> torch.Tensor:
    """Batch mean of the (N+1)-way softmax contrastive loss.

    The positive logit is the raw cosine similarity; the configured margin
    is ignored here.
    """
    return _contrastive_loss(batch, cfg.temperature, margin=0.0)


def margin_info_nce_loss(batch: ContrastiveBatch, cfg: ContrastiveLossConfig) -> torch.Tensor:
    """Contrastive loss with the margin subtracted from the positive logit.

    Identical to :func:`info_nce_loss` except the positive similarity is
    shifted down by ``cfg.margin`` before temperature scaling, in both the
    numerator and the denominator; with margin 0 the two coincide exactly.
    """
    return _contrastive_loss(batch, cfg.temperature, cfg.margin)


def cross_entropy_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Batch-mean classification cross entropy over raw logits."""
    if logits.ndim != 2:
        raise ValueError("logits must be [B, C]")
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ValueError("labels must be a [B] vector matching logits")
    c = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    return F.cross_entropy(logits, labels)


def combined_student_loss(
    ce: torch.Tensor, distill: torch.Tensor, cfg: Phase2LossConfig
) -> torch.Tensor:
    """Student objective: classification term plus weighted distillation term."""
    if cfg.distill_weight == 0.0:
        return ce
    return ce + cfg.distill_weight * distill
