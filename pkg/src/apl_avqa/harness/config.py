"""Training configuration and its JSON form."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from ..blocks import ModelDims
from ..model import ModelConfig
from ..positivity import PHI_PRESETS, LossConfig
from ..scenes import WORDS, SceneDims

# detector-specific settings reported for the full-size model
PAPER_PRESETS = {
    "detr": {"lr_init": 1e-4, "phi": PHI_PRESETS["detr"], "N": 100},
    "faster-rcnn": {"lr_init": 1.75e-4, "phi": PHI_PRESETS["faster-rcnn"], "N": 36},
}


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 1e-3
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 8
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    d: int = 32
    heads: int = 4
    scene: SceneDims = field(default_factory=SceneDims)
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.lr_init <= 0 or self.epochs < 1 or self.batch_size < 1 or self.lr_decay_every < 1:
            raise ValueError("lr_init, epochs, batch_size and lr_decay_every must be positive")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError(f"lr_decay_factor must be in (0, 1], got {self.lr_decay_factor}")

    @property
    def model_dims(self) -> ModelDims:
        s = self.scene
        return ModelDims(T=s.T, N=s.N, L=s.L_max, d=self.d, d_a=s.d_a, d_o=s.d_o, C=s.C, heads=self.heads, vocab=len(WORDS))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "scene" in raw:
            raw["scene"] = SceneDims(**raw["scene"])
        if "loss" in raw:
            raw["loss"] = LossConfig(**raw["loss"])
        if "model" in raw:
            raw["model"] = ModelConfig(**raw["model"])
        return cls(**raw)

    def with_updates(self, **kwargs) -> "TrainConfig":
        return replace(self, **kwargs)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


def load_config(path) -> TrainConfig:
    return TrainConfig.from_dict(json.loads(Path(path).read_text()))


def paper_preset(name: str, base: TrainConfig | None = None) -> TrainConfig:
    """Full-size hyperparameters (batch 64, 20 epochs, detector-specific lr and phi)."""
    preset = PAPER_PRESETS[name]
    base = base or TrainConfig()
    return base.with_updates(
        lr_init=preset["lr_init"],
        batch_size=64,
        epochs=20,
        loss=replace(base.loss, phi=preset["phi"]),
    )
