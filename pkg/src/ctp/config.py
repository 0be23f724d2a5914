"""YAML config files -> typed dataclass configs, with helpful errors.

A config file is a nested mapping with one section per concern, e.g.::

    train:
      epochs: 30
      base_lr: 0.01
    encoder:
      spatial_stride: 8
    head:
      pool_size: 5

Unknown keys are rejected so typos fail loudly. Lists stand in for
tuples. Every dataclass field is addressable; ``config_help`` renders
the full key/default listing shown in the CLI --help output.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError
from .geometry import Sigmas
from .model import EncoderSpec, HeadSpec, PixelNorm
from .trajsynth import TrajectoryConstraints
from .trainer import TrainConfig
from .transfer import ProbeConfig

__all__ = [
    "GenerateConfig",
    "RetrievalConfig",
    "load_config_file",
    "dataclass_from_mapping",
    "section",
    "config_help",
]


@dataclass(frozen=True)
class GenerateConfig:
    """Dataset generation parameters."""

    n_clips: int = 64
    T: int = 8
    H: int = 64
    W: int = 64
    K: int = 3
    p_mask: float = 0.2
    seed: int = 0
    source: str = "procedural"  # "procedural" | "frames"
    frames_dir: str | None = None
    workers: int = 1

    def __post_init__(self) -> None:
        if self.source not in ("procedural", "frames"):
            raise ConfigError(f"unknown source {self.source!r}")
        if self.source == "frames" and not self.frames_dir:
            raise ConfigError("source 'frames' needs frames_dir")
        if self.T < 2:
            raise ConfigError(f"T must be >= 2, got {self.T}")


@dataclass(frozen=True)
class RetrievalConfig:
    """Clip retrieval evaluation parameters."""

    n_clips_per_video: int = 3
    ks: tuple[int, ...] = (1, 5)
    seed: int = 0

    def __post_init__(self) -> None:
        if any(k < 1 for k in self.ks):
            raise ConfigError(f"ks must be positive, got {self.ks}")


def load_config_file(path: str | Path | None) -> dict[str, Any]:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    return dict(data)


def dataclass_from_mapping(cls, data: Mapping[str, Any], where: str):
    """Build ``cls`` from a mapping, rejecting unknown keys, lists -> tuples."""
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r} (known: {sorted(known)})")
        if isinstance(value, list):
            value = tuple(value)
        if key == "constraints" and isinstance(value, Mapping):
            value = dataclass_from_mapping(TrajectoryConstraints, value, f"{where}.constraints")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_SECTION_TYPES = {
    "train": TrainConfig,
    "encoder": EncoderSpec,
    "head": HeadSpec,
    "sigmas": Sigmas,
    "pixel_norm": PixelNorm,
    "constraints": TrajectoryConstraints,
    "generate": GenerateConfig,
    "probe": ProbeConfig,
    "retrieval": RetrievalConfig,
}


def section(config: Mapping[str, Any], name: str, overrides: Mapping[str, Any] | None = None):
    """Extract and type one config section, applying CLI overrides on top."""
    cls = _SECTION_TYPES[name]
    data = dict(config.get(name, {}) or {})
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    return dataclass_from_mapping(cls, data, name)


def config_help(section_names: tuple[str, ...]) -> str:
    """Render "section.key (default)" lines for the CLI help epilog."""
    lines = ["config keys (YAML sections; defaults in parentheses):"]
    for name in section_names:
        cls = _SECTION_TYPES[name]
        for f in dataclasses.fields(cls):
            if f.default is not dataclasses.MISSING:
                default = f.default
            elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
                default = f.default_factory()  # type: ignore[misc]
            else:
                default = "<required>"
            lines.append(f"  {name}.{f.name} ({default})")
    return "\n".join(lines)
