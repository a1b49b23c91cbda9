"""Flat key-value run configuration with dotted namespaces.

The on-disk format is one ``key=value`` per line, ``#`` comments allowed;
human-diffable and trivially parsed anywhere.  Override precedence is
command line > config file > dataclass defaults.
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path


def parse_flat_file(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"malformed config line: {raw!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def parse_override(item: str) -> tuple[str, str]:
    if "=" not in item:
        raise ValueError(f"override must look like key=value, got {item!r}")
    key, _, value = item.partition("=")
    return key.strip(), value.strip()


def format_flat(config: dict[str, str]) -> str:
    return "\n".join(f"{k}={config[k]}" for k in sorted(config)) + "\n"


def _coerce(value: str, target_type):
    origin = typing.get_origin(target_type)
    if origin is typing.Union:  # Optional[...]
        args = [a for a in typing.get_args(target_type) if a is not type(None)]
        return _coerce(value, args[0])
    if origin in (tuple, list):
        if value == "":
            return origin()
        item_type = typing.get_args(target_type)[0]
        items = [_coerce(v, item_type) for v in value.split(",")]
        return origin(items)
    if target_type is bool:
        lowered = value.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean from {value!r}")
    if target_type is int:
        return int(value)
    if target_type is float:
        return float(value)
    return value


def dataclass_from_flat(cls, flat: dict[str, str], prefix: str = ""):
    """Build a config dataclass from flat ``prefix.field=value`` entries;
    fields absent from the mapping keep their defaults."""
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = f"{prefix}.{f.name}" if prefix else f.name
        if key in flat:
            kwargs[f.name] = _coerce(flat[key], hints[f.name])
    return cls(**kwargs)


def resolve_flat(defaults: dict[str, str], file_config: dict[str, str] | None,
                 overrides: dict[str, str] | None) -> dict[str, str]:
    resolved = dict(defaults)
    if file_config:
        resolved.update(file_config)
    if overrides:
        resolved.update(overrides)
    return resolved
