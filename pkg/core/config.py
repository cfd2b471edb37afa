"""
Validated configuration for the model, the training protocol and augmentation.

Configs are pydantic models. Their text form is sorted `key=value` lines with
JSON-encoded values; it is what checkpoints and run manifests carry, and
`config_hash` is the SHA-256 of it.
"""
from __future__ import annotations

import hashlib
import json
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, computed_field, model_validator

from core.errors import ConfigError


class AugmentParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    rotation: Literal["none", "z", "so3"] = "z"
    scale_lo: float = 0.8
    scale_hi: float = 1.2
    jitter_sigma: float = Field(0.01, ge=0.0)
    jitter_clip: float = Field(0.02, ge=0.0)

    @model_validator(mode="after")
    def _check_range(self):
        if self.scale_lo > self.scale_hi:
            raise ValueError(f"scale range [{self.scale_lo}, {self.scale_hi}] is empty")
        return self

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls(rotation="none", scale_lo=1.0, scale_hi=1.0, jitter_sigma=0.0, jitter_clip=0.0)


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    layers: int = Field(3, ge=1)
    channels: int = Field(64, ge=1)
    k: int = Field(16, ge=1)
    split: int = Field(3, ge=2)
    heads: int = Field(4, ge=1)
    sigma2: float = Field(1.0, gt=0.0)
    lambdas: tuple[int, ...] = (0, 1, 1)
    fusion: int = Field(256, ge=1)
    scale_factor: float = Field(1.2, ge=1.0)
    kernel_mode: Literal["soft", "argmax"] = "soft"
    loss_mode: Literal["all", "last"] = "all"
    pool: Literal["max", "max+avg"] = "max"
    seed: int = 1

    @computed_field
    @property
    def delta(self) -> int:
        return self.split + 1

    @model_validator(mode="after")
    def _check_shapes(self):
        if self.channels % self.heads:
            raise ValueError(f"channels={self.channels} not divisible by heads={self.heads}")
        if len(self.lambdas) != self.layers:
            raise ValueError(f"lambdas has {len(self.lambdas)} entries for {self.layers} layers")
        if any(lam not in (0, 1) for lam in self.lambdas):
            raise ValueError("lambda switches must be 0 or 1")
        return self

    @property
    def descriptor_size(self) -> int:
        return self.fusion * (2 if self.pool == "max+avg" else 1)


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    epochs: int = Field(30, ge=0)
    probe_epochs: int = Field(30, ge=0)
    batch_size: int = Field(8, ge=1)
    lr: float = Field(0.1, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(5e-4, ge=0.0)
    dropout: float = Field(0.5, ge=0.0, lt=1.0)
    augment: AugmentParams = AugmentParams()
    use_augment: bool = True
    train_fraction: float = Field(1.0, gt=0.0, le=1.0)
    n_points: int = Field(512, ge=8)
    threads: int = Field(1, ge=1)
    seed: int = 1


PRESETS: dict[str, tuple[dict, dict]] = {
    "desk": ({}, {}),
    "tiny": (
        dict(layers=2, channels=8, k=8, split=2, heads=2, lambdas=(0, 1), fusion=16),
        dict(epochs=2, probe_epochs=2, batch_size=4, n_points=64),
    ),
    # full-scale reference run; not meant for CPU runs
    "full": (
        dict(),
        dict(epochs=250, probe_epochs=250, batch_size=32, n_points=1024),
    ),
}


def preset(name: str, model_overrides: dict | None = None,
           train_overrides: dict | None = None) -> tuple[ModelConfig, TrainConfig]:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    model_kw, train_kw = PRESETS[name]
    try:
        model = ModelConfig(**{**model_kw, **(model_overrides or {})})
        train = TrainConfig(**{**train_kw, **(train_overrides or {})})
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None
    return model, train


def with_updates(cfg: BaseModel, **updates) -> BaseModel:
    """Copy of `cfg` with `updates` applied and re-validated."""
    try:
        return type(cfg)(**{**cfg.model_dump(exclude={"delta"}), **updates})
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None


def _flatten(prefix: str, data: dict, out: dict):
    for key, value in data.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            _flatten(name + ".", value, out)
        else:
            out[name] = value


def config_text(cfg: BaseModel) -> str:
    flat: dict = {}
    _flatten("", cfg.model_dump(mode="json"), flat)
    return "".join(f"{k}={json.dumps(flat[k])}\n" for k in sorted(flat))


def parse_config_text(text: str) -> dict:
    data: dict = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ConfigError(f"config line {line_no}: expected key=value")
        node = data
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = json.loads(raw)
    return data


def model_config_from_text(text: str) -> ModelConfig:
    data = parse_config_text(text)
    data.pop("delta", None)
    try:
        return ModelConfig(**data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None


def config_hash(cfg: BaseModel) -> str:
    return hashlib.sha256(config_text(cfg).encode("utf-8")).hexdigest()
