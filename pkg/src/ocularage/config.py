"""Run configuration: one TOML file with a section per pipeline stage."""

from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .dataman import Modality, SynthParams
from .errors import ConfigError
from .multitask import TrainConfig
from .preproc import AugmentPolicy, SegmentationConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

WORKSPACE_ENV = "OCULARAGE_WORKSPACE"
# tuple settings whose length is free (element type follows the first default)
_VARIABLE_LENGTH = {("train", "widths")}


@dataclass(frozen=True)
class PathsConfig:
    workspace: str = "workspace"
    manifest: str = ""
    checkpoint: str = ""


@dataclass(frozen=True)
class SensorConfig:
    noise_sigma: float = 0.02
    gain: float = 1.15


@dataclass(frozen=True)
class SplitConfig:
    ratios: tuple = (0.8, 0.1, 0.1)
    seed: int = 42


@dataclass(frozen=True)
class BenchConfig:
    warmup: int = 100
    iterations: int = 1000


@dataclass(frozen=True)
class RunConfig:
    modality: Modality = Modality.EYE
    workers: int = 1
    paths: PathsConfig = field(default_factory=PathsConfig)
    # the pipeline keeps both eyes of every session
    synth: SynthParams = field(default_factory=lambda: SynthParams(eyes_per_session=2))
    sensor: SensorConfig = field(default_factory=SensorConfig)
    preproc: SegmentationConfig = field(default_factory=SegmentationConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    split: SplitConfig = field(default_factory=SplitConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    @property
    def workspace(self) -> Path:
        return Path(os.environ.get(WORKSPACE_ENV) or self.paths.workspace)

    @property
    def manifest_path(self) -> Path:
        return Path(self.paths.manifest) if self.paths.manifest else self.workspace / "manifest.csv"

    @property
    def checkpoint_path(self) -> Path:
        if self.paths.checkpoint:
            return Path(self.paths.checkpoint)
        return self.workspace / "checkpoints" / f"{self.modality.value}.ocag"

    def with_modality(self, modality: Modality) -> "RunConfig":
        return dataclasses.replace(self, modality=modality,
                                   train=dataclasses.replace(self.train, modality=modality))

    def with_checkpoint(self, path) -> "RunConfig":
        return dataclasses.replace(self, paths=dataclasses.replace(self.paths, checkpoint=str(path)))


_DEFAULTS = RunConfig()
_SECTIONS = {f.name: getattr(_DEFAULTS, f.name) for f in dataclasses.fields(RunConfig)
             if dataclasses.is_dataclass(getattr(_DEFAULTS, f.name))}


def _coerce(section: str, name: str, default, value):
    where = f"{section}.{name}" if section else name
    if isinstance(default, Modality):
        try:
            return Modality(value)
        except ValueError:
            raise ConfigError(f"{where}: expected one of {[m.value for m in Modality]}, got {value!r}")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if (section, name) in _VARIABLE_LENGTH and isinstance(value, list) and value:
            return tuple(_coerce(section, name, default[0], v) for v in value)
        if not isinstance(value, list) or len(value) != len(default):
            raise ConfigError(f"{where}: expected a list of {len(default)} values, got {value!r}")
        return tuple(_coerce(section, name, d, v) for d, v in zip(default, value))
    raise ConfigError(f"{where}: unsupported setting")  # pragma: no cover


def _build(defaults, section: str, table: dict):
    if not isinstance(table, dict):
        raise ConfigError(f"[{section}] must be a table")
    known = {f.name for f in dataclasses.fields(defaults)}
    unknown = sorted(set(table) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    values = {k: _coerce(section, k, getattr(defaults, k), v) for k, v in table.items()}
    try:
        return dataclasses.replace(defaults, **values)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def parse_config(data: dict) -> RunConfig:
    top = {}
    sections = {}
    for key, value in data.items():
        if key in _SECTIONS:
            sections[key] = _build(_SECTIONS[key], key, value)
        elif key in ("modality", "workers"):
            top[key] = _coerce("", key, getattr(_DEFAULTS, key), value)
        else:
            raise ConfigError(f"unknown key {key!r}")
    if top.get("workers", 1) < 1:
        raise ConfigError("workers must be >= 1")
    cfg = RunConfig(**top, **sections)
    if "modality" in (data.get("train") or {}) and "modality" in top and cfg.train.modality is not cfg.modality:
        raise ConfigError("train.modality disagrees with modality")
    modality = top.get("modality", cfg.train.modality)
    return cfg.with_modality(modality)


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    return parse_config(data)
