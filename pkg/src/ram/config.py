"""Model/training configuration with the reference and desk-scale profiles."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

__all__ = ["ModelConfig", "DESK_EPOCHS", "DESK_BATCH_SIZE"]

# reference training schedule is 300 epochs at batch 128; desk runs use these
DESK_EPOCHS = 100
DESK_BATCH_SIZE = 32

_SCOPES = ("per-task", "joint")


@dataclass
class ModelConfig:
    d_model: int = 128
    slots: int = 20
    heads: int = 8
    hops: int = 3
    mask_ratio: float = 0.4
    lr: float = 4e-4
    epochs: int = 300
    batch_size: int = 128
    seed: int = 0
    use_rehearsal: bool = True
    use_anticipation: bool = True
    use_binary: bool = True
    random_mask: bool = False
    scope: str = "per-task"
    n_max: int = 16
    val_fraction: float = 0.1
    grad_clip: float = 1.0
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("d_model", "slots", "heads", "hops", "epochs", "batch_size", "n_max", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.mask_ratio <= 1.0:
            raise ValueError(f"mask_ratio must be in (0, 1], got {self.mask_ratio}")
        if self.lr <= 0.0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        if self.scope not in _SCOPES:
            raise ValueError(f"scope must be one of {_SCOPES}, got {self.scope!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.grad_clip <= 0.0:
            raise ValueError(f"grad_clip must be positive, got {self.grad_clip}")

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Desk-scale profile: same model, shorter schedule, smaller batches."""
        base = {"epochs": DESK_EPOCHS, "batch_size": DESK_BATCH_SIZE}
        base.update(overrides)
        return cls(**base)

    @property
    def mask_mode(self) -> str:
        return "random" if self.random_mask else "coref"

    @property
    def n_positions(self) -> int:
        # one extra slot for the CLS prefix on masked samples
        return self.n_max + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
