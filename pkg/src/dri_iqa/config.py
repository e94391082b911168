"""Flat, strictly validated training configuration.

Unset training hyperparameters resolve to the published two-stage
settings; model geometry defaults to the small desk-scale variant.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import yaml

from .ram import LossWeights

ABLATIONS = ("v1", "v2", "v3", "proposed")

# stage -> (batch, epochs)
_STAGE_DEFAULTS = {1: (64, 300), 2: (16, 200)}


class ConfigError(ValueError):
    def __init__(self, key: str, reason: str):
        super().__init__(f"config key {key!r}: {reason}")
        self.key = key


@dataclass
class TrainConfig:
    stage: int = 1
    lr: float = 2e-4
    batch: int | None = None
    epochs: int | None = None
    weight_decay: float = 1e-8
    t_max: float = 300.0
    eta_min: float = 1e-6
    seed: int = 0
    ablation: str = "proposed"
    # loss weights
    w_mse_score: float = 1.0
    w_infonce: float = 0.1
    w_restoration: float = 0.1
    lambda_perceptual: float = 0.01
    w_rs: float = 0.1
    restoration_reduction: str = "mean"
    # contrastive
    temperature: float = 0.07
    momentum: float = 0.0
    pairs_per_image: int = 1
    # geometry
    dim: int = 128
    encoder_widths: tuple = (16, 32, 64, 128)
    encoder_norm: str = "batch"
    restorer_widths: tuple = (16, 32, 48, 64, 64, 64)
    crop: int = 64
    n_crops: int = 9
    width: int = 128
    n_guidance: int = 2
    n_transformer: int = 2
    heads: int = 4
    attention: str = "spatial"
    positional: bool = True
    quality_channels: tuple | None = None
    # plumbing
    grad_clip: float = 1.0
    palette: str | None = None
    workers: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError("stage", f"must be 1 or 2, got {self.stage}")
        batch, epochs = _STAGE_DEFAULTS[self.stage]
        if self.batch is None:
            self.batch = batch
        if self.epochs is None:
            self.epochs = epochs
        self.ablation = str(self.ablation).lower()
        for key in ("encoder_widths", "restorer_widths", "quality_channels"):
            value = getattr(self, key)
            if value is not None:
                setattr(self, key, tuple(int(v) for v in value))
        self._validate()

    def _validate(self):
        if not self.lr > 0:
            raise ConfigError("lr", f"must be > 0, got {self.lr}")
        if self.batch < 2:
            raise ConfigError("batch", f"must be >= 2, got {self.batch}")
        if self.epochs < 1:
            raise ConfigError("epochs", f"must be >= 1, got {self.epochs}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be >= 0")
        if not self.t_max > 0:
            raise ConfigError("t_max", "must be > 0")
        if self.eta_min < 0 or self.eta_min > self.lr:
            raise ConfigError("eta_min", f"must lie in [0, lr], got {self.eta_min}")
        if self.ablation not in ABLATIONS:
            raise ConfigError("ablation", f"must be one of {ABLATIONS}, got {self.ablation!r}")
        if not self.temperature > 0:
            raise ConfigError("temperature", "must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum", "must be in [0, 1)")
        if self.dim <= 0 or self.dim % 2:
            raise ConfigError("dim", f"must be a positive even integer, got {self.dim}")
        if self.crop < 1 or self.n_crops < 1 or self.pairs_per_image < 1:
            raise ConfigError("crop", "crop, n_crops and pairs_per_image must be >= 1")
        if self.encoder_norm not in ("group", "batch", "none"):
            raise ConfigError("encoder_norm", f"must be 'group', 'batch' or 'none', got {self.encoder_norm!r}")
        if self.attention not in ("spatial", "channel"):
            raise ConfigError("attention", f"must be 'spatial' or 'channel', got {self.attention!r}")
        if self.restoration_reduction not in ("mean", "sum"):
            raise ConfigError("restoration_reduction", "must be 'mean' or 'sum'")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip", "must be >= 0 (0 disables clipping)")
        try:
            self.loss_weights
        except ValueError as exc:
            raise ConfigError("loss_weights", str(exc)) from None

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_mse_score, self.w_infonce, self.w_restoration, self.lambda_perceptual, self.w_rs)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out

    def replace(self, **changes) -> "TrainConfig":
        data = self.to_dict()
        data.update(changes)
        return from_dict(data)


def _coerce(key: str, value: Any, annotation: str):
    kinds = {
        "int": int, "float": float, "str": str, "bool": bool, "tuple": tuple,
    }
    allowed = [a.strip() for a in annotation.split("|")]
    if value is None:
        if "None" in allowed:
            return None
        raise ConfigError(key, "may not be null")
    for name in allowed:
        t = kinds.get(name)
        if t is None:
            continue
        if t is bool:
            if isinstance(value, bool):
                return value
            continue
        if t is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if t is int and isinstance(value, int) and not isinstance(value, bool):
            return value
        if t is str and isinstance(value, str):
            return value
        if t is tuple and isinstance(value, (list, tuple)):
            if not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
                raise ConfigError(key, "expected a list of integers")
            return tuple(value)
    expected = " or ".join(a for a in allowed if a != "None")
    raise ConfigError(key, f"expected {expected}, got {type(value).__name__} {value!r}")


def from_dict(data: dict) -> TrainConfig:
    known = {f.name: f for f in fields(TrainConfig)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    values = {k: _coerce(k, v, str(known[k].type)) for k, v in data.items()}
    return TrainConfig(**values)


def load_config(path=None, **overrides) -> TrainConfig:
    """Read a flat ``key: value`` file (YAML or JSON); empty files give all defaults."""
    data: dict = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError("<file>", f"not parseable: {exc}") from None
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError("<file>", "top level must be a key: value mapping")
        data.update(loaded)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return from_dict(data)


def dump_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
