"""Synthetic desk-scale image dataset generator.

Each class is a low-frequency random texture; instances perturb it with a
random circular shift, a brightness factor, an instance-level texture and
pixel noise.  The class signal is spread over the whole image, so random
crops and color jitter keep it recoverable - which is what the contrastive
phase needs to have something to learn.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .data import sample_seed


def _low_freq_field(g: torch.Generator, channels: int, grid: int, size: int) -> torch.Tensor:
    noise = torch.randn(1, channels, grid, grid, generator=g)
    field = F.interpolate(noise, size=(size, size), mode="bicubic", align_corners=False)
    return field[0]


def make_synthetic_dataset(
    root: str | Path,
    classes: int = 10,
    train_per_class: int = 50,
    val_per_class: int = 10,
    size: int = 64,
    seed: int = 0,
) -> Path:
    """Write a ``root/<split>/<class>/...png`` tree; returns the root path.

    Fully deterministic for a fixed seed.  Existing files are overwritten.
    """
    root = Path(root)
    for cls in range(classes):
        proto_g = torch.Generator().manual_seed(sample_seed(seed, 0, cls))
        proto = _low_freq_field(proto_g, 3, 4, size)
        proto = proto / proto.abs().max().clamp_min(1e-6)
        counts = {"train": train_per_class, "val": val_per_class}
        for split_idx, (split, n) in enumerate(counts.items()):
            # One generator per (class, split): instance content never
            # depends on how many images the other split requests.
            g = torch.Generator().manual_seed(sample_seed(seed, split_idx + 1, cls))
            out_dir = root / split / f"class_{cls:02d}"
            out_dir.mkdir(parents=True, exist_ok=True)
            for i in range(n):
                dy = int(torch.randint(-size // 4, size // 4 + 1, (1,), generator=g).item())
                dx = int(torch.randint(-size // 4, size // 4 + 1, (1,), generator=g).item())
                img = torch.roll(proto, shifts=(dy, dx), dims=(1, 2))
                brightness = 0.7 + 0.6 * torch.rand((), generator=g).item()
                instance = 0.35 * _low_freq_field(g, 3, 8, size)
                pixel_noise = 0.08 * torch.randn(3, size, size, generator=g)
                img = 0.5 + 0.35 * brightness * img + instance + pixel_noise
                arr = (img.clamp(0, 1) * 255).to(torch.uint8).permute(1, 2, 0).numpy()
                Image.fromarray(np.ascontiguousarray(arr)).save(out_dir / f"img_{i:04d}.png")
    return root
