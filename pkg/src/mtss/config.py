"""Training configuration and strict dict/JSON/YAML loading for config dataclasses."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from typing import Any, Mapping, Optional, Tuple, Type, TypeVar

BACKBONE_PRESETS = ("small", "wide", "medium", "resnet50")

T = TypeVar("T")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters shared by the teacher and student trainers.

    ``warmup_images`` only affects student training. ``top_classes`` only
    affects teacher training (classes outside the top-N by image count are
    not sampled as anchors).
    """

    dim: int = 64
    gamma: float = 1.0
    beta: float = 1.0
    lr: float = 0.2
    lr_decay_factor: float = 0.5
    lr_decay_every_epochs: int = 10
    epochs: int = 40
    batch_size: int = 128
    samples_per_epoch: int = 300_000
    warmup_images: int = 0
    seed: int = 0
    backbone_preset: str = "small"
    momentum: float = 0.0
    weight_decay: float = 0.0
    top_classes: Optional[int] = None
    select_best: bool = True

    def __post_init__(self):
        for name in ("dim", "batch_size", "samples_per_epoch", "lr_decay_every_epochs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0 or self.warmup_images < 0:
            raise ConfigError("epochs and warmup_images must be >= 0")
        if not self.lr > 0 or not 0 < self.lr_decay_factor <= 1:
            raise ConfigError("lr must be > 0 and lr_decay_factor in (0, 1]")
        if self.gamma < 0 or self.beta < 0:
            raise ConfigError("gamma and beta must be >= 0")
        if self.backbone_preset not in BACKBONE_PRESETS:
            raise ConfigError(f"backbone_preset must be one of {BACKBONE_PRESETS}")
        if self.top_classes is not None and self.top_classes < 1:
            raise ConfigError("top_classes must be >= 1")
        if self.dim < 2:
            raise ConfigError("dim must be >= 2")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def full_scale_teacher(cls) -> "TrainConfig":
        """Full-scale teacher settings (ResNet50, 1024-d, 300K samples/epoch)."""
        return cls(dim=1024, gamma=1.0, lr=0.2, lr_decay_factor=0.5, lr_decay_every_epochs=10,
                   epochs=40, batch_size=128, samples_per_epoch=300_000,
                   backbone_preset="resnet50")

    @classmethod
    def full_scale_student(cls) -> "TrainConfig":
        return cls(dim=1024, beta=1.0, lr=0.4, lr_decay_factor=0.5, lr_decay_every_epochs=10,
                   epochs=100, batch_size=128, samples_per_epoch=300_000,
                   warmup_images=1_000_000, backbone_preset="resnet50")


def from_dict(cls: Type[T], data: Optional[Mapping[str, Any]], where: str = "") -> T:
    """Build dataclass ``cls`` from a mapping, rejecting unknown keys."""
    data = dict(data or {})
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or cls.__name__}: unknown keys {unknown}")
    for f in fields(cls):
        if f.name in data and isinstance(data[f.name], list):
            data[f.name] = tuple(data[f.name])
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where or cls.__name__}: {exc}") from exc


def to_dict(obj) -> dict:
    d = dataclasses.asdict(obj)
    return json.loads(json.dumps(d))


def config_hash(obj) -> str:
    payload = json.dumps(to_dict(obj) if dataclasses.is_dataclass(obj) else obj, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def as_tuple(v) -> Tuple:
    return tuple(v) if isinstance(v, (list, tuple)) else (v,)
