"""Checkpoint archive: the hand-off object between the two phases.

A checkpoint is a single zip archive holding one ``.npy`` blob per tensor
plus a plain-text ``meta.txt`` (phase, epoch, config snapshot, config hash,
tensor layout descriptors).  Entry order, timestamps and compression are
pinned, so saving the same checkpoint twice produces byte-identical files.
"""

from __future__ import annotations

import hashlib
import io
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    phase: str                              # "phase1" | "phase2"
    epoch: int
    config: dict[str, str] = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    metric_digest: str = ""

    def config_hash(self) -> str:
        h = hashlib.sha256()
        for key in sorted(self.config):
            h.update(f"{key}={self.config[key]}\n".encode())
        return h.hexdigest()

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix.``, with the prefix stripped."""
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}


def module_arrays(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    """Flatten a module state dict (parameters and buffers) into named arrays."""
    out = {}
    for name, tensor in module.state_dict().items():
        out[f"{prefix}.{name}"] = tensor.detach().cpu().numpy().copy()
    return out


def load_module_arrays(module: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {name: torch.from_numpy(arr.copy()) for name, arr in arrays.items()}
    module.load_state_dict(state)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    meta_lines = [
        f"phase={ckpt.phase}",
        f"epoch={ckpt.epoch}",
        f"metric_digest={ckpt.metric_digest}",
        f"config_hash={ckpt.config_hash()}",
    ]
    meta_lines += [f"config.{k}={ckpt.config[k]}" for k in sorted(ckpt.config)]
    for name in sorted(ckpt.tensors):
        arr = ckpt.tensors[name]
        shape = ",".join(str(s) for s in arr.shape)
        meta_lines.append(f"tensor.{name}={arr.dtype.name}:{shape}")
    meta = ("\n".join(meta_lines) + "\n").encode()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(_zip_info("meta.txt"), meta)
        for name in sorted(ckpt.tensors):
            buf = io.BytesIO()
            np.save(buf, ckpt.tensors[name], allow_pickle=False)
            zf.writestr(_zip_info(f"tensors/{name}.npy"), buf.getvalue())


def _zip_info(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.create_system = 3
    info.external_attr = 0o644 << 16
    return info


def load_checkpoint(path: str | Path) -> Checkpoint:
    with zipfile.ZipFile(path, "r") as zf:
        meta: dict[str, str] = {}
        config: dict[str, str] = {}
        for line in zf.read("meta.txt").decode().splitlines():
            if not line:
                continue
            key, _, value = line.partition("=")
            if key.startswith("config."):
                config[key[len("config."):]] = value
            elif not key.startswith("tensor."):
                meta[key] = value
        tensors: dict[str, np.ndarray] = {}
        for entry in zf.namelist():
            if entry.startswith("tensors/") and entry.endswith(".npy"):
                name = entry[len("tensors/"):-len(".npy")]
                tensors[name] = np.load(io.BytesIO(zf.read(entry)), allow_pickle=False)
    ckpt = Checkpoint(
        phase=meta.get("phase", ""),
        epoch=int(meta.get("epoch", "0")),
        config=config,
        tensors=tensors,
        metric_digest=meta.get("metric_digest", ""),
    )
    stored_hash = meta.get("config_hash", "")
    if stored_hash and stored_hash != ckpt.config_hash():
        raise ValueError(f"checkpoint config hash mismatch in {path}")
    return ckpt
