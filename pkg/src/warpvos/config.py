"""Run configuration: one JSON document drives every command.

Unknown keys are rejected (typos must not silently change runs) and the
canonical hash of the document is recorded in every output manifest.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .autodiff import UsageError
from .network import ModelConfig


class ConfigError(UsageError):
    pass


@dataclass
class MemoryConfig:
    train_stride: int = 2
    eval_stride: int = 5
    capacity: int | None = None


@dataclass
class TrainSection:
    stage1_steps: int = 1000
    stage2_steps: int = 600
    lr_start: float = 3e-4
    lr_end: float = 2e-5
    poly_power: float = 0.9
    warmup_steps: int = 0
    weight_decay: float = 0.01
    encoder_lr_mult: float = 0.1
    clip_len: int = 5
    grad_clip: float = 10.0
    bootstrap_start: float = 1.0
    bootstrap_end: float = 0.15
    bootstrap_anneal_start: float = 0.2
    merge_prob: float = 0.4
    augment: bool = True
    crop_hw: list[int] | None = None


@dataclass
class ModelSection:
    embed_dim: int = 256
    heads: int = 8
    ffn_hidden: int = 1024
    window: int = 15
    slots: int = 10
    enc_channels: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    dec_channels: int = 128
    norm_groups: int = 8
    fusion: str = "sum"


@dataclass
class FlowSection:
    source: str = "gt"  # zero | gt | block | external:<dir>
    block_radius: int = 8
    block_size: int = 9
    block_median: bool = True


@dataclass
class MetricsSection:
    boundary_tolerance_fraction: float = 0.008


@dataclass
class RunConfig:
    seed: int = 0
    dtype: str = "float32"
    model: ModelSection = field(default_factory=ModelSection)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    train: TrainSection = field(default_factory=TrainSection)
    flow: FlowSection = field(default_factory=FlowSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(
            embed_dim=m.embed_dim,
            heads=m.heads,
            ffn_hidden=m.ffn_hidden,
            window=m.window,
            slots=m.slots,
            enc_channels=tuple(m.enc_channels),
            dec_channels=m.dec_channels,
            norm_groups=m.norm_groups,
            fusion=m.fusion,
        )

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        return _build(cls, obj, path="config")

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_json(doc)


_NESTED = {
    "model": ModelSection,
    "memory": MemoryConfig,
    "train": TrainSection,
    "flow": FlowSection,
    "metrics": MetricsSection,
}


def _build(cls, obj: dict, path: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object, got {type(obj).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(obj) - set(fields)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in obj.items():
        if cls is RunConfig and name in _NESTED:
            kwargs[name] = _build(_NESTED[name], value, path=f"{path}.{name}")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
