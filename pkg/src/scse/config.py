"""Run configuration document: ``arch``, ``train``, ``data`` and ``output`` sections.

The document is YAML (JSON is accepted too, being a YAML subset). Unknown
keys anywhere are rejected. Precedence is command-line flags, then the
file, then the defaults below.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .data import DatasetSpec
from .se import SEVariant
from .training import TrainConfig
from .zoo import PRESETS, ArchSpec, ConfigError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ArchSection(_Strict):
    kind: Literal["unet", "sdnet", "densenet"] = "unet"
    preset: Optional[str] = "desk"
    block_channels: Optional[List[int]] = None
    bottleneck_channels: Optional[int] = None
    num_classes: Optional[int] = None
    conv_kernel: Optional[int] = None
    convs_per_block: Optional[int] = None
    se_variant: Literal["none", "cse", "sse", "scse"] = "none"
    se_reduction: int = Field(2, ge=1)
    input_channels: int = Field(1, ge=1)
    se_zero_init: bool = False

    @field_validator("preset")
    @classmethod
    def _known_preset(cls, v):
        if v is not None and v not in PRESETS:
            raise ValueError(f"unknown preset {v!r}; expected one of {sorted(PRESETS)}")
        return v

    def to_spec(self, kind: Optional[str] = None, variant: Optional[str] = None) -> ArchSpec:
        base = dict(PRESETS[self.preset]) if self.preset else {}
        for key in ("block_channels", "bottleneck_channels", "num_classes", "conv_kernel", "convs_per_block"):
            val = getattr(self, key)
            if val is not None:
                base[key] = val
        return ArchSpec(
            arch_kind=kind or self.kind,
            se_variant=SEVariant.parse(variant or self.se_variant),
            se_reduction=self.se_reduction,
            input_channels=self.input_channels,
            se_zero_init=self.se_zero_init,
            preset=self.preset,
            **base,
        )


class TrainSection(_Strict):
    initial_lr: float = Field(0.01, gt=0)
    lr_decay_factor: float = Field(0.1, gt=0)
    lr_decay_every: int = Field(10, ge=1)
    momentum: float = Field(0.95, ge=0)
    weight_decay: float = Field(1e-4, ge=0)
    batch_size: int = Field(4, ge=1)
    max_epochs: int = Field(30, ge=1)
    convergence_patience: int = Field(5, ge=1)
    loss_mix: Optional[float] = Field(None, ge=0)
    seed: int = 0

    def to_config(self, seed: Optional[int] = None) -> TrainConfig:
        d = self.model_dump()
        if seed is not None:
            d["seed"] = seed
        return TrainConfig(**d)


class DataSection(_Strict):
    num_train: int = Field(200, ge=1)
    num_val: int = Field(25, ge=1)
    num_test: int = Field(25, ge=1)
    size: int = Field(32, ge=16)
    num_classes: int = Field(4, ge=2)
    shapes_per_image: Tuple[int, int] = (3, 6)
    intensity_separation: float = Field(1.0, gt=0, le=1)
    noise_std: float = Field(0.08, ge=0)
    class_size_skew: float = Field(1.5, ge=1)
    label_noise: float = Field(0.0, ge=0, lt=1)
    seed: int = 42
    dataset_dir: Optional[str] = None

    @field_validator("size")
    @classmethod
    def _divisible(cls, v):
        if v % 16:
            raise ValueError(f"size must be divisible by 16, got {v}")
        return v

    def to_spec(self) -> DatasetSpec:
        d = self.model_dump(exclude={"dataset_dir"})
        try:
            return DatasetSpec(**d)
        except ValueError as exc:
            raise ConfigError(f"invalid run config: data: {exc}") from None


class OutputSection(_Strict):
    dir: str = "runs/default"
    exclude_background: bool = True


class RunConfig(_Strict):
    arch: ArchSection = Field(default_factory=ArchSection)
    train: TrainSection = Field(default_factory=TrainSection)
    data: DataSection = Field(default_factory=DataSection)
    output: OutputSection = Field(default_factory=OutputSection)

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def check_consistency(self) -> None:
        spec = self.arch.to_spec()
        if spec.num_classes != self.data.num_classes:
            raise ConfigError(
                f"arch.num_classes ({spec.num_classes}) differs from data.num_classes ({self.data.num_classes})"
            )


def _format_validation_error(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        key = ".".join(str(p) for p in err["loc"])
        parts.append(f"{key}: {err['msg']}")
    return "invalid run config: " + "; ".join(parts)


def parse_run_config(doc: Optional[dict]) -> RunConfig:
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a mapping with keys arch, train, data, output")
    try:
        cfg = RunConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_format_validation_error(exc)) from None
    try:
        cfg.arch.to_spec()
    except ValueError as exc:
        raise ConfigError(f"invalid run config: arch: {exc}") from None
    return cfg


def load_run_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    return parse_run_config(doc)


def override(cfg: RunConfig, updates: dict) -> RunConfig:
    """Apply dotted-key overrides (``{"train.seed": 3}``) and revalidate."""
    doc = cfg.model_dump(mode="json")
    for dotted, value in updates.items():
        if value is None:
            continue
        section, key = dotted.split(".", 1)
        doc[section][key] = value
    return parse_run_config(doc)
