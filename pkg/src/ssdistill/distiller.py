"""Feature-map distillation between a frozen teacher and a trainable student.

The teacher's feature maps are treated as constants (detached before the
distance is computed), so gradient flows only into the student features and
the connector parameters.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import torch
from torch import nn


class StageConnector(nn.Module):
    """Pointwise channel projection from student feature space to teacher
    feature space, with optional per-channel batch normalization after the
    projection.

    The projection is a 1x1 convolution applied at every spatial location.
    Parameters belong to the student's optimizer group.
    """

    def __init__(
        self,
        student_channels: int,
        teacher_channels: int,
        normalize: bool = True,
        init_std: float = 0.01,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.proj = nn.Conv2d(student_channels, teacher_channels, kernel_size=1, bias=True)
        with torch.no_grad():
            self.proj.weight.normal_(0.0, init_std, generator=generator)
            self.proj.bias.zero_()
        self.norm = nn.BatchNorm2d(teacher_channels) if normalize else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.proj(x)
        if self.norm is not None:
            out = self.norm(out)
        return out


def connector_transform(f_s: torch.Tensor, connector: StageConnector) -> torch.Tensor:
    """Map a student stage tensor [B, C_s, H, W] into teacher space [B, C_t, H, W]."""
    if f_s.ndim != 4:
        raise ValueError(f"expected a [B, C, H, W] tensor, got shape {tuple(f_s.shape)}")
    if f_s.shape[1] != connector.proj.in_channels:
        raise ValueError(
            f"stage has {f_s.shape[1]} channels, connector expects {connector.proj.in_channels}"
        )
    return connector(f_s)


@dataclass
class FeatureMapSet:
    """Per-stage (teacher, student) feature-map pairs, ordered by depth.

    Teacher tensors are detached at loss time; spatial dims of each pair
    must agree (channel counts may differ, the connector reconciles them).
    """

    stages: list[tuple[torch.Tensor, torch.Tensor]] = field(default_factory=list)

    def __post_init__(self):
        for i, (f_t, f_s) in enumerate(self.stages):
            if f_t.ndim != 4 or f_s.ndim != 4:
                raise ValueError(f"stage {i}: feature maps must be 4-D")
            if f_t.shape[0] != f_s.shape[0] or f_t.shape[2:] != f_s.shape[2:]:
                raise ValueError(
                    f"stage {i}: teacher {tuple(f_t.shape)} and student "
                    f"{tuple(f_s.shape)} disagree on batch/spatial dims"
                )


def distill_loss(features: FeatureMapSet, connectors: list[StageConnector]) -> torch.Tensor:
    """Sum over stages of the mean squared distance between the detached
    teacher map and the connector-transformed student map.

    Per-stage mean over all elements keeps the loss scale independent of
    resolution; stages then add up.
    """
    if len(features.stages) != len(connectors):
        raise ValueError(
            f"{len(features.stages)} stages but {len(connectors)} connectors"
        )
    total = torch.zeros((), dtype=torch.float32)
    for (f_t, f_s), connector in zip(features.stages, connectors):
        mapped = connector_transform(f_s, connector)
        if mapped.shape != f_t.shape:
            raise ValueError(
                f"connector output {tuple(mapped.shape)} does not match teacher "
                f"map {tuple(f_t.shape)}"
            )
        total = total + ((f_t.detach() - mapped) ** 2).mean()
    return total


def freeze_teacher(model: nn.Module) -> nn.Module:
    """Mark every teacher parameter non-trainable and switch to inference
    mode so normalization layers use their stored statistics."""
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return model


def parameter_digest(model: nn.Module) -> str:
    """SHA-256 over all parameters and buffers; bit-identical weights give
    identical digests."""
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
