"""Experiment configuration: one YAML document with a section per module.

Loading is strict: unknown keys, wrong types and violated invariants raise
:class:`ConfigError` naming the offending key path (``adapt.alpha``).
"""

from __future__ import annotations

import hashlib
import json
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import yaml

from .adapt import AdaptConfig
from .daca import AugmentConfig
from .fsutil import atomic_write_text
from .toy.world import DomainShift, SceneSpec

THRESHOLD_GRID = (0.1, 0.3, 0.5, 0.7, 0.9, 0.95)
ALPHA_GRID = (0.3, 0.5, 0.7, 0.8, 0.9, 0.95, 0.99)


class ConfigError(ValueError):
    def __init__(self, key_path: str, message: str):
        self.key_path = key_path or "<root>"
        super().__init__(f"{self.key_path}: {message}")


@dataclass
class WorldConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    shift: DomainShift = field(default_factory=lambda: DomainShift("fog", 0.8))
    n_source: int = 1000
    n_target: int = 500
    n_eval: int = 150
    source_seed: int = 1
    eval_seed: int = 2
    target_seed: int = 3

    def __post_init__(self):
        for name in ("n_source", "n_target", "n_eval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class DetectorConfig:
    channels: tuple[int, ...] = (8, 16, 32, 32, 32)
    strides: tuple[int, ...] = (2, 2, 2, 1, 1)
    ref_size: float = 24.0
    score_floor: float = 0.05
    nms_iou: float = 0.5
    max_detections: int = 100
    box_weight: float = 2.0
    loss_scale: float = 0.05
    init_seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if len(self.channels) != len(self.strides) or not self.channels:
            raise ValueError("channels and strides must be non-empty and of equal length")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if not 0.0 <= self.score_floor < 1.0 or not 0.0 < self.nms_iou <= 1.0:
            raise ValueError("score_floor must lie in [0, 1) and nms_iou in (0, 1]")


@dataclass
class PretrainConfig:
    epochs: int = 20
    learning_rate: float = 3e-3
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("need epochs >= 0, batch_size >= 1 and learning_rate > 0")


@dataclass
class AdaptSection:
    """The :class:`AdaptConfig` knobs that are not set elsewhere in the experiment."""

    selection_confidence: float = 0.5
    alpha: float = 0.9
    epochs: int = 12
    learning_rate: float = 1e-3
    momentum: float = 0.9
    enable_daca: bool = True
    enable_teacher: bool = True

    def __post_init__(self):
        AdaptConfig(**asdict(self))


@dataclass
class AblationConfig:
    threshold_grid: tuple[float, ...] = THRESHOLD_GRID
    alpha_grid: tuple[float, ...] = ALPHA_GRID
    eval_every: int = 0

    def __post_init__(self):
        for v in self.threshold_grid:
            AdaptConfig(selection_confidence=v)
        for v in self.alpha_grid:
            AdaptConfig(alpha=v)
        if not self.threshold_grid or not self.alpha_grid:
            raise ValueError("ablation grids must be non-empty")


@dataclass
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    adapt: AdaptSection = field(default_factory=AdaptSection)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    seeds: tuple[int, ...] = (0, 1, 2)
    eval_every: int = 5
    out_dir: str = "runs"

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if self.eval_every < 0:
            raise ValueError("eval_every must be non-negative")

    def adapt_config(self, seed: int, **overrides) -> AdaptConfig:
        cfg = AdaptConfig(**asdict(self.adapt), seed=seed, eval_every=self.eval_every, augment=self.augment)
        return replace(cfg, **overrides) if overrides else cfg

    def detector_kwargs(self) -> dict:
        d = asdict(self.detector)
        d["seed"] = d.pop("init_seed")
        d["num_classes"] = self.world.scene.num_classes
        return d

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def save(self, path) -> None:
        atomic_write_text(path, self.to_yaml())

    @classmethod
    def from_dict(cls, data) -> "ExperimentConfig":
        return _build(cls, {} if data is None else data, "")

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError("<root>", f"malformed YAML: {exc}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_yaml(Path(path).read_text())


# -- strict (de)serialization ------------------------------------------------------


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _join(path, key):
    return f"{path}.{key}" if path else str(key)


def _coerce(hint, value, path, base=None):
    if is_dataclass(hint):
        return _build(hint, value, path, base)
    origin = typing.get_origin(hint)
    if origin is tuple:
        args = typing.get_args(hint)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(path, f"expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        # YAML 1.1 reads "1e-3" as a string, so numeric strings are accepted here
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    raise TypeError(f"unsupported config type {hint!r}")


def _build(cls, data, path, base=None):
    """Construct ``cls`` from ``data`` laid over ``base`` (default: ``cls()``)."""
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in fields(cls) if f.init]
    unknown = [k for k in data if k not in names]
    if unknown:
        raise ConfigError(_join(path, unknown[0]), f"unknown key (allowed: {', '.join(names)})")
    base = cls() if base is None else base
    defaults = {n: getattr(base, n) for n in names}
    kwargs = {k: _coerce(hints[k], v, _join(path, k), defaults[k]) for k, v in data.items()}
    try:
        return cls(**{**defaults, **kwargs})
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        # blame the first key that fails on its own
        for k, v in kwargs.items():
            try:
                cls(**{**defaults, k: v})
            except (ValueError, TypeError) as single:
                raise ConfigError(_join(path, k), str(single)) from None
        raise ConfigError(path, str(exc)) from None


def load_config(path=None) -> ExperimentConfig:
    return ExperimentConfig() if path is None else ExperimentConfig.load(path)

