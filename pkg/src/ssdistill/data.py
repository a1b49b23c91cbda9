"""Dataset ingestion and the two augmentation pipelines.

Directory layout: ``root/<split>/<class_name>/<image files>``.  Manifests
serialize to a line-delimited text file (path TAB class index) preceded by a
``#key=value`` metadata header.

Augmentations are implemented as pure functions of (image, policy, seed):
every stochastic parameter is drawn from a generator seeded per sample, so
a fixed (image, seed) pair always reproduces the same output.  Phase-1
consumption goes through :class:`ContrastiveEpochLoader`, which exposes
images only - no label can reach phase-1 code.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torchvision.transforms.v2 import functional as TF

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}

DEFAULT_MEAN = (0.5, 0.5, 0.5)
DEFAULT_STD = (0.25, 0.25, 0.25)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    root: str
    split: str
    class_names: list[str]
    entries: list[tuple[str, int]]          # (absolute path, class index)
    metadata: dict[str, str] = field(default_factory=dict)

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    def image_paths(self) -> list[str]:
        """Paths only; the label-free view handed to phase-1."""
        return [path for path, _ in self.entries]

    def channel_stats(self) -> tuple[tuple[float, ...], tuple[float, ...]]:
        if "mean" in self.metadata and "std" in self.metadata:
            mean = tuple(float(v) for v in self.metadata["mean"].split(","))
            std = tuple(float(v) for v in self.metadata["std"].split(","))
            return mean, std
        return DEFAULT_MEAN, DEFAULT_STD


def load_manifest(root: str | Path, split: str, compute_stats: bool = False) -> DatasetManifest:
    """Scan ``root/split`` into a manifest.

    Class indices follow sorted class-directory names; entries are ordered
    lexicographically by path, so repeated loads of the same tree are
    identical.  An empty class directory is recorded as a warning in the
    manifest metadata, not an error.
    """
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise FileNotFoundError(f"split directory not found: {split_dir}")
    class_dirs = sorted(d for d in split_dir.iterdir() if d.is_dir())
    if not class_dirs:
        raise FileNotFoundError(f"no class directories under {split_dir}")
    class_names = [d.name for d in class_dirs]
    entries: list[tuple[str, int]] = []
    warnings: list[str] = []
    for idx, class_dir in enumerate(class_dirs):
        files = sorted(
            str(p) for p in class_dir.iterdir()
            if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
        )
        if not files:
            warnings.append(f"empty class directory: {class_dir.name}")
        entries.extend((path, idx) for path in files)
    entries.sort(key=lambda e: e[0])
    metadata = {"class_count": str(len(class_names))}
    if warnings:
        metadata["warnings"] = ";".join(warnings)
    manifest = DatasetManifest(str(root), split, class_names, entries, metadata)
    if compute_stats:
        mean, std = compute_channel_stats(manifest)
        manifest.metadata["mean"] = ",".join(f"{v:.6f}" for v in mean)
        manifest.metadata["std"] = ",".join(f"{v:.6f}" for v in std)
    return manifest


def compute_channel_stats(manifest: DatasetManifest) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Per-channel mean/std over every decodable image of the manifest."""
    total = torch.zeros(3, dtype=torch.float64)
    total_sq = torch.zeros(3, dtype=torch.float64)
    count = 0
    for path, _ in manifest.entries:
        img = decode_image(path)
        if img is None:
            continue
        x = img.to(torch.float64) / 255.0
        total += x.mean(dim=(1, 2))
        total_sq += (x ** 2).mean(dim=(1, 2))
        count += 1
    if count == 0:
        raise ValueError("no decodable images to compute statistics from")
    mean = total / count
    var = total_sq / count - mean ** 2
    std = var.clamp_min(1e-12).sqrt()
    return tuple(mean.tolist()), tuple(std.tolist())


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    lines = [f"#root={manifest.root}", f"#split={manifest.split}",
             f"#classes={','.join(manifest.class_names)}"]
    lines += [f"#{k}={v}" for k, v in sorted(manifest.metadata.items())]
    lines += [f"{p}\t{c}" for p, c in manifest.entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> DatasetManifest:
    header: dict[str, str] = {}
    entries: list[tuple[str, int]] = []
    for line in Path(path).read_text().splitlines():
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            header[key] = value
        else:
            p, _, c = line.partition("\t")
            entries.append((p, int(c)))
    class_names = header.pop("classes", "").split(",") if header.get("classes") else []
    root = header.pop("root", "")
    split = header.pop("split", "")
    return DatasetManifest(root, split, class_names, entries, header)


# ---------------------------------------------------------------------------
# Augmentation policies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentationPolicy:
    """Parameters of one augmentation pipeline.

    ``eval`` mode is fully deterministic (resize + center crop); the
    ``two_view_contrastive`` mode always draws two independent samples of
    the stochastic pipeline for the same source image.
    """

    mode: str                                # two_view_contrastive | supervised_train | eval
    crop_size: int = 32
    crop_scale: tuple[float, float] = (0.2, 1.0)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    jitter_strength: tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    mean: tuple[float, ...] = DEFAULT_MEAN
    std: tuple[float, ...] = DEFAULT_STD

    def __post_init__(self):
        if self.mode not in ("two_view_contrastive", "supervised_train", "eval"):
            raise ValueError(f"unknown augmentation mode '{self.mode}'")


def two_view_policy(crop_size: int = 32, **overrides) -> AugmentationPolicy:
    return replace(AugmentationPolicy("two_view_contrastive", crop_size=crop_size), **overrides)


def supervised_policy(crop_size: int = 32, **overrides) -> AugmentationPolicy:
    base = AugmentationPolicy(
        "supervised_train", crop_size=crop_size,
        jitter_prob=0.0, grayscale_prob=0.0, blur_prob=0.0,
    )
    return replace(base, **overrides)


def eval_policy(crop_size: int = 32, **overrides) -> AugmentationPolicy:
    base = AugmentationPolicy(
        "eval", crop_size=crop_size,
        flip_prob=0.0, jitter_prob=0.0, grayscale_prob=0.0, blur_prob=0.0,
    )
    return replace(base, **overrides)


# ---------------------------------------------------------------------------
# Image decoding and transforms
# ---------------------------------------------------------------------------

def decode_image(path: str | Path) -> torch.Tensor | None:
    """Decode to a uint8 [3, H, W] tensor; returns None (and logs) on failure
    so one corrupt file never aborts an epoch."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"))
    except Exception as exc:
        log.warning("skipping undecodable image %s: %s", path, exc)
        return None
    return torch.from_numpy(arr.copy()).permute(2, 0, 1)


def _uniform(g: torch.Generator, lo: float, hi: float) -> float:
    return lo + (hi - lo) * torch.rand((), generator=g).item()


def _sample_crop_box(h: int, w: int, scale: tuple[float, float],
                     g: torch.Generator) -> tuple[int, int, int, int]:
    area = h * w
    for _ in range(10):
        target_area = area * _uniform(g, *scale)
        aspect = math.exp(_uniform(g, math.log(3 / 4), math.log(4 / 3)))
        cw = int(round(math.sqrt(target_area * aspect)))
        ch = int(round(math.sqrt(target_area / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(torch.randint(0, h - ch + 1, (1,), generator=g).item())
            left = int(torch.randint(0, w - cw + 1, (1,), generator=g).item())
            return top, left, ch, cw
    side = min(h, w)
    return (h - side) // 2, (w - side) // 2, side, side


def _blur_kernel_size(crop_size: int) -> int:
    return max(3, (crop_size // 20) * 2 + 1)


def _normalize(x: torch.Tensor, policy: AugmentationPolicy) -> torch.Tensor:
    return TF.normalize(x, mean=list(policy.mean), std=list(policy.std))


def _stochastic_view(image: torch.Tensor, policy: AugmentationPolicy,
                     g: torch.Generator) -> torch.Tensor:
    _, h, w = image.shape
    top, left, ch, cw = _sample_crop_box(h, w, policy.crop_scale, g)
    x = TF.resized_crop(image, top, left, ch, cw,
                        [policy.crop_size, policy.crop_size],
                        interpolation=TF.InterpolationMode.BILINEAR, antialias=True)
    x = x.to(torch.float32) / 255.0
    if _uniform(g, 0, 1) < policy.flip_prob:
        x = TF.horizontal_flip(x)
    if _uniform(g, 0, 1) < policy.jitter_prob:
        b, c, s, hu = policy.jitter_strength
        x = TF.adjust_brightness(x, _uniform(g, max(0.0, 1 - b), 1 + b))
        x = TF.adjust_contrast(x, _uniform(g, max(0.0, 1 - c), 1 + c))
        x = TF.adjust_saturation(x, _uniform(g, max(0.0, 1 - s), 1 + s))
        x = TF.adjust_hue(x, _uniform(g, -hu, hu))
    if _uniform(g, 0, 1) < policy.grayscale_prob:
        x = TF.rgb_to_grayscale(x, num_output_channels=3)
    if _uniform(g, 0, 1) < policy.blur_prob:
        k = _blur_kernel_size(policy.crop_size)
        sigma = _uniform(g, *policy.blur_sigma)
        x = TF.gaussian_blur(x, kernel_size=[k, k], sigma=[sigma, sigma])
    return _normalize(x, policy)


def two_view_augment(image: torch.Tensor, policy: AugmentationPolicy,
                     seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Two independently sampled views of one image; identical (image, seed)
    inputs reproduce identical view pairs."""
    if policy.mode != "two_view_contrastive":
        raise ValueError(f"policy mode must be two_view_contrastive, got {policy.mode}")
    g = torch.Generator().manual_seed(seed)
    view1 = _stochastic_view(image, policy, g)
    view2 = _stochastic_view(image, policy, g)
    return view1, view2


def supervised_augment(image: torch.Tensor, policy: AugmentationPolicy,
                       seed: int = 0) -> torch.Tensor:
    """Supervised-train augmentation (random resized crop + flip) or the
    deterministic eval path (resize + center crop), both normalized."""
    if policy.mode == "supervised_train":
        g = torch.Generator().manual_seed(seed)
        _, h, w = image.shape
        top, left, ch, cw = _sample_crop_box(h, w, policy.crop_scale, g)
        x = TF.resized_crop(image, top, left, ch, cw,
                            [policy.crop_size, policy.crop_size],
                            interpolation=TF.InterpolationMode.BILINEAR, antialias=True)
        x = x.to(torch.float32) / 255.0
        if _uniform(g, 0, 1) < policy.flip_prob:
            x = TF.horizontal_flip(x)
        return _normalize(x, policy)
    if policy.mode == "eval":
        resize_to = int(round(policy.crop_size / 0.875))
        x = TF.resize(image, [resize_to],
                      interpolation=TF.InterpolationMode.BILINEAR, antialias=True)
        x = TF.center_crop(x, [policy.crop_size, policy.crop_size])
        x = x.to(torch.float32) / 255.0
        return _normalize(x, policy)
    raise ValueError(f"policy mode must be supervised_train or eval, got {policy.mode}")


def sample_seed(base_seed: int, epoch: int, index: int) -> int:
    """Stable per-sample augmentation seed, independent of process state."""
    digest = hashlib.blake2b(
        f"{base_seed}:{epoch}:{index}".encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "big") % (2 ** 63)


# ---------------------------------------------------------------------------
# Epoch loaders
# ---------------------------------------------------------------------------

class _ImageCache:
    """Decoded-image cache; desk-scale datasets fit comfortably in memory."""

    def __init__(self):
        self._cache: dict[str, torch.Tensor | None] = {}

    def get(self, path: str) -> torch.Tensor | None:
        if path not in self._cache:
            self._cache[path] = decode_image(path)
        return self._cache[path]


class ContrastiveEpochLoader:
    """Shuffled two-view batches for phase-1.  Holds image paths only, so no
    label information can leak into the contrastive phase."""

    def __init__(self, image_paths: list[str], policy: AugmentationPolicy,
                 batch_size: int, seed: int):
        if policy.mode != "two_view_contrastive":
            raise ValueError("ContrastiveEpochLoader needs a two_view_contrastive policy")
        self.paths = list(image_paths)
        self.policy = policy
        self.batch_size = batch_size
        self.seed = seed
        self._cache = _ImageCache()

    def batches_per_epoch(self) -> int:
        return math.ceil(len(self.paths) / self.batch_size)

    def epoch(self, epoch: int):
        g = torch.Generator().manual_seed(sample_seed(self.seed, epoch, -1))
        order = torch.randperm(len(self.paths), generator=g).tolist()
        v1, v2 = [], []
        for idx in order:
            image = self._cache.get(self.paths[idx])
            if image is None:
                continue
            a, b = two_view_augment(image, self.policy, sample_seed(self.seed, epoch, idx))
            v1.append(a)
            v2.append(b)
            if len(v1) == self.batch_size:
                yield torch.stack(v1), torch.stack(v2)
                v1, v2 = [], []
        if v1:
            yield torch.stack(v1), torch.stack(v2)


class SupervisedEpochLoader:
    """Shuffled (images, labels) batches for phase-2 and the supervised baseline."""

    def __init__(self, entries: list[tuple[str, int]], policy: AugmentationPolicy,
                 batch_size: int, seed: int):
        self.entries = list(entries)
        self.policy = policy
        self.batch_size = batch_size
        self.seed = seed
        self._cache = _ImageCache()

    def batches_per_epoch(self) -> int:
        return math.ceil(len(self.entries) / self.batch_size)

    def epoch(self, epoch: int):
        g = torch.Generator().manual_seed(sample_seed(self.seed, epoch, -1))
        order = torch.randperm(len(self.entries), generator=g).tolist()
        yield from self._batches(order, epoch)

    def eval_batches(self):
        """Deterministic order, deterministic (eval-mode) augmentation."""
        yield from self._batches(range(len(self.entries)), epoch=0)

    def _batches(self, order, epoch: int):
        images, labels = [], []
        for idx in order:
            path, cls = self.entries[idx]
            image = self._cache.get(path)
            if image is None:
                continue
            images.append(supervised_augment(image, self.policy,
                                             sample_seed(self.seed, epoch, idx)))
            labels.append(cls)
            if len(images) == self.batch_size:
                yield torch.stack(images), torch.tensor(labels, dtype=torch.long)
                images, labels = [], []
        if images:
            yield torch.stack(images), torch.tensor(labels, dtype=torch.long)
