"""Residual backbones with per-stage feature taps, plus the projection and
classifier heads used by the two training phases.

Backbones follow the small-input convention: a 3x3 stem without max-pooling,
then four residual stages with strides 1/2/2/2.  ``forward_stages`` exposes
each stage output for the distillation loss.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

STAGE_NAMES = ("stage1", "stage2", "stage3", "stage4")


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        width = out_ch
        self.conv1 = nn.Conv2d(in_ch, width, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, width * self.expansion, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(width * self.expansion)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_ch != width * self.expansion:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, width * self.expansion, 1, stride=stride, bias=False),
                nn.BatchNorm2d(width * self.expansion),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return F.relu(out + self.shortcut(x))


class ResNetBackbone(nn.Module):
    """Four-stage residual backbone returning globally pooled features."""

    def __init__(self, block, blocks_per_stage, widths):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, widths[0], 3, stride=1, padding=1, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
        )
        self.stages = nn.ModuleList()
        in_ch = widths[0]
        for i, (n_blocks, width) in enumerate(zip(blocks_per_stage, widths)):
            layers = []
            for j in range(n_blocks):
                stride = 2 if (i > 0 and j == 0) else 1
                layers.append(block(in_ch, width, stride))
                in_ch = width * block.expansion
            self.stages.append(nn.Sequential(*layers))
        self.feature_dim = in_ch
        self.stage_channels = {
            name: widths[i] * block.expansion for i, name in enumerate(STAGE_NAMES)
        }

    def forward_stages(self, x: torch.Tensor):
        """Returns (pooled features [B, feature_dim], dict of stage outputs)."""
        taps: dict[str, torch.Tensor] = {}
        out = self.stem(x)
        for name, stage in zip(STAGE_NAMES, self.stages):
            out = stage(out)
            taps[name] = out
        pooled = F.adaptive_avg_pool2d(out, 1).flatten(1)
        return pooled, taps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled, _ = self.forward_stages(x)
        return pooled


class ProjectionHead(nn.Module):
    """Two-layer MLP head used only during contrastive pre-training."""

    def __init__(self, in_dim: int, out_dim: int = 128):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, in_dim),
            nn.ReLU(inplace=True),
            nn.Linear(in_dim, out_dim),
        )

    def forward(self, x):
        return self.net(x)


class LinearClassifier(nn.Module):
    """Zero-initialized affine classifier; stable on a pretrained trunk."""

    def __init__(self, in_dim: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(in_dim, num_classes)
        nn.init.zeros_(self.fc.weight)
        nn.init.zeros_(self.fc.bias)

    def forward(self, x):
        return self.fc(x)


_ARCHS = {
    # name: (block, blocks per stage, stage widths)
    "tiny": (BasicBlock, (1, 1, 1, 1), (8, 16, 32, 64)),
    "small": (BasicBlock, (1, 1, 1, 1), (16, 32, 64, 128)),
    "resnet18": (BasicBlock, (2, 2, 2, 2), (64, 128, 256, 512)),
    "resnet50": (Bottleneck, (3, 4, 6, 3), (64, 128, 256, 512)),
}


def build_backbone(arch: str) -> ResNetBackbone:
    if arch not in _ARCHS:
        raise ValueError(f"unknown backbone '{arch}', choose from {sorted(_ARCHS)}")
    block, blocks, widths = _ARCHS[arch]
    return ResNetBackbone(block, blocks, widths)
