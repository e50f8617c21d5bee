"""Optimizer settings and per-epoch logs shared by the trainable models."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .errors import ConfigError


@dataclass
class TrainConfig:
    epochs: int = 150
    lr: float = 5e-4
    weight_decay: float = 1e-4
    batch_size: int = 8
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("epochs, batch_size and eval_every must be >= 1")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be > 0 and weight_decay >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainingLog:
    """One dict per epoch (loss plus validation metrics when evaluated)."""

    entries: list[dict] = field(default_factory=list)
    best_epoch: int = -1

    def to_dict(self) -> dict:
        return {"best_epoch": self.best_epoch, "entries": self.entries}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingLog":
        return cls(list(d["entries"]), d["best_epoch"])
