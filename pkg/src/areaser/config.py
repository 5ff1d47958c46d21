"""Run configuration: nested dataclasses loaded from YAML.

Unknown keys are rejected at every level.  ``resolved`` dumps the complete
configuration, defaults included, so a run directory always records what
actually ran.
"""
from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Tuple

import yaml

from .area_attention import AreaConfig
from .audio import FeatureParams
from .augment import VtlpConfig
from .errors import ConfigurationError
from .model import ModelConfig


@dataclass(frozen=True)
class SegmentConfig:
    window_seconds: float = 2.0
    train_overlap: float = 1.0
    test_overlap: float = 1.6


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    replicas: int = 0  # VTLP replicas per training utterance; 0 disables augmentation
    normalize: bool = False
    monitor_train: bool = True
    folds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "folds", tuple(int(f) for f in self.folds))
        if self.epochs < 0 or self.batch_size < 1 or self.replicas < 0:
            raise ConfigurationError("epochs and replicas must be >= 0, batch_size >= 1")
        if any(f < 0 or f > 4 for f in self.folds):
            raise ConfigurationError(f"fold indices must be in 0..4, got {self.folds}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    features: FeatureParams = field(default_factory=FeatureParams)
    segments: SegmentConfig = field(default_factory=SegmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    vtlp: VtlpConfig = field(default_factory=VtlpConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = "runs"


_NESTED = {
    RunConfig: {"features": FeatureParams, "segments": SegmentConfig, "model": ModelConfig,
                "vtlp": VtlpConfig, "train": TrainConfig},
    ModelConfig: {"attention": AreaConfig},
}


def from_dict(cls, data: Dict[str, Any], where: str = ""):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get(cls, {}).get(key)
        kwargs[key] = from_dict(sub, value, f"{where}{key}.") if sub else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"{where or 'config'}: {exc}") from exc


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return from_dict(RunConfig, data or {})


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def resolved(config: RunConfig) -> dict:
    return _plain(asdict(config))


def dump_config(config: RunConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(resolved(config), fh, sort_keys=True)
