"""Experiment configuration: a YAML document mapped onto the module dataclasses.

Unknown keys anywhere in the document are an error. Every key is
documented in ``docs/config.md``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .model import ModelConfig
from .phantom import OrganTemplate, PhantomSpec, PhantomSpecError
from .sampler import SamplerConfig
from .train import TrainConfig

__all__ = [
    "ConfigError",
    "PathsConfig",
    "DatasetConfig",
    "EmbedConfig",
    "EvalConfig",
    "ExperimentConfig",
    "load_config",
    "config_from_dict",
]

LANDMARK_KINDS = ("center", "edge")


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


@dataclass
class PathsConfig:
    out: str = "runs/default"
    data: str | None = None  # phantom dataset; default <out>/phantoms
    checkpoint: str | None = None  # default <out>/train/final.pt
    train_data: str | None = None  # optional dataset directory used for training instead of fresh phantoms

    def resolve(self, base: Path) -> "PathsConfig":
        def fix(p):
            return None if p is None else str(p if Path(p).is_absolute() else base / p)

        out = Path(fix(self.out))
        return PathsConfig(
            out=str(out),
            data=fix(self.data) or str(out / "phantoms"),
            checkpoint=fix(self.checkpoint) or str(out / "train" / "final.pt"),
            train_data=fix(self.train_data),
        )


@dataclass
class DatasetConfig:
    """The evaluation phantoms written by ``generate``."""

    count: int = 20
    seed_offset: int = 10000


@dataclass
class EmbedConfig:
    window: tuple[int, int, int] = (32, 32, 24)
    overlap: float = 0.5
    batch_size: int = 4
    foreground_threshold: float | None = -500.0


@dataclass
class EvalConfig:
    shots: int = 5
    landmark_kinds: tuple[str, ...] = LANDMARK_KINDS


@dataclass
class ExperimentConfig:
    seed: int = 0
    workers: int = 1
    paths: PathsConfig = field(default_factory=PathsConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def train_config(self) -> TrainConfig:
        """Training settings with the experiment seed applied."""
        return dataclasses.replace(self.train, seed=self.seed)

    def validate(self) -> None:
        try:
            self.phantom.validate()
            self.sampler.validate()
            self.model.validate()
            self.train_config().validate()
        except (PhantomSpecError, ValueError) as e:
            raise ConfigError(str(e)) from e
        if self.train.variant != "naive" and self.sampler.aug.p_rescale != 1.0:
            raise ConfigError("sampler.aug.p_rescale must be 1 for the augm and equiv variants")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.dataset.count < 1:
            raise ConfigError("dataset.count must be >= 1")
        if not 0 <= self.embed.overlap < 1:
            raise ConfigError("embed.overlap must be in [0, 1)")
        if min(self.embed.window) < 1 or self.embed.batch_size < 1:
            raise ConfigError("embed.window and embed.batch_size must be positive")
        if self.eval.shots < 1:
            raise ConfigError("eval.shots must be >= 1")
        bad = set(self.eval.landmark_kinds) - set(LANDMARK_KINDS)
        if bad or not self.eval.landmark_kinds:
            raise ConfigError(f"eval.landmark_kinds must be a non-empty subset of {LANDMARK_KINDS}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return _plain(d)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _coerce(value, default, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        if default and len(value) != len(default) and not isinstance(default[0], str):
            raise ConfigError(f"{where}: expected {len(default)} values, got {len(value)}")
        return tuple(_coerce(v, default[0], f"{where}[{i}]") if default else v for i, v in enumerate(value))
    if isinstance(default, int) and not isinstance(value, bool) and isinstance(value, int):
        return value
    if isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value) if isinstance(default, float) or isinstance(value, float) else value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _organs(value, where: str) -> tuple[OrganTemplate, ...]:
    if not isinstance(value, list):
        raise ConfigError(f"{where}: expected a list of organ templates")
    keys = {"label", "center", "radii_mm", "hu"}
    out = []
    for i, item in enumerate(value):
        if not isinstance(item, dict) or set(item) != keys:
            raise ConfigError(f"{where}[{i}]: needs exactly the keys {sorted(keys)}")
        out.append(OrganTemplate(
            str(item["label"]),
            _coerce(item["center"], (0.0, 0.0, 0.0), f"{where}[{i}].center"),
            _coerce(item["radii_mm"], (0.0, 0.0, 0.0), f"{where}[{i}].radii_mm"),
            float(_coerce(item["hu"], 0.0, f"{where}[{i}].hu")),
        ))
    return tuple(out)


# fields whose default is None: the type of a non-null value
_OPTIONAL = {
    (TrainConfig, "lam"): 0.0,
    (EmbedConfig, "foreground_threshold"): 0.0,
    (PathsConfig, "data"): "",
    (PathsConfig, "checkpoint"): "",
    (PathsConfig, "train_data"): "",
}
# the training seed is the experiment seed, so it is not a key of its own
_SKIP = {TrainConfig: ("seed",)}


def _build(cls, data: Any, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name for f in dataclasses.fields(cls)} - set(_SKIP.get(cls, ()))
    unknown = sorted(set(data) - fields)
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + str(k) for k in unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        key = f"{where}.{name}" if where else name
        default = getattr(defaults, name)
        if cls is PhantomSpec and name == "organs":
            kwargs[name] = _organs(value, key)
        elif dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, key)
        elif (cls, name) in _OPTIONAL:
            kwargs[name] = None if value is None else _coerce(value, _OPTIONAL[cls, name], key)
        else:
            kwargs[name] = _coerce(value, default, key)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from e


def config_from_dict(data: dict | None, base: Path | str = ".") -> ExperimentConfig:
    """Build and validate an :class:`ExperimentConfig`; relative paths resolve against ``base``."""
    cfg = _build(ExperimentConfig, data, "")
    cfg.paths = cfg.paths.resolve(Path(base))
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return config_from_dict({}, Path.cwd())
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML ({e})") from e
    return config_from_dict(data, path.parent)
