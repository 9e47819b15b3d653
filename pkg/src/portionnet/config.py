"""Typed, validated configuration for data generation, model, training and evaluation.

Every section rejects unknown keys. A run configuration is loaded from a YAML
(or JSON) file and then overridden field by field from the command line, so
precedence is flags > file > defaults.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from portionnet.errors import ConfigError

ShapeKind = Literal["box", "ellipsoid", "cylinder"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataConfig(_Strict):
    class_count: int = Field(12, ge=1, le=108)
    samples_per_class: int = Field(40, ge=1)
    kinds: tuple[ShapeKind, ...] = ("box", "ellipsoid", "cylinder")
    # kcal/mL
    density_tiers: tuple[float, ...] = (0.6, 1.5)
    # characteristic object size in meters, scaled per kind by a fixed aspect
    size_buckets: tuple[float, ...] = (0.07, 0.11)
    size_jitter: tuple[float, float] = (0.8, 1.2)
    n_points: int = Field(1024, ge=64)
    resolution: int = Field(64, ge=32)
    frame_size: float = Field(0.3, gt=0)
    train_fraction: float = Field(0.8, gt=0, lt=1)
    seed: int = 0

    @field_validator("density_tiers", "size_buckets")
    @classmethod
    def _positive(cls, v):
        if not v or any(x <= 0 for x in v):
            raise ValueError("must be a non-empty list of positive numbers")
        return v

    @field_validator("kinds")
    @classmethod
    def _unique_kinds(cls, v):
        if not v or len(set(v)) != len(v):
            raise ValueError("must be a non-empty list of distinct shape kinds")
        return v

    @field_validator("size_jitter")
    @classmethod
    def _jitter(cls, v):
        lo, hi = v
        if not 0 < lo <= hi:
            raise ValueError("size_jitter must satisfy 0 < low <= high")
        return v

    @model_validator(mode="after")
    def _enough_combinations(self):
        n = len(self.kinds) * len(self.density_tiers) * len(self.size_buckets)
        if self.class_count > n:
            raise ValueError(
                f"class_count={self.class_count} exceeds the {n} available "
                "(kind x density tier x size bucket) combinations"
            )
        return self


class ModelConfig(_Strict):
    class_count: int = Field(12, ge=1)
    n_points: int = Field(1024, ge=64)
    backbones: Literal["standin", "torchvision"] = "standin"
    backbone_dims: tuple[int, int] = (768, 512)
    feature_dim: int = 256
    proj_hidden: int = 512
    pointnet_widths: tuple[int, ...] = (32, 64, 128)
    pool_resolutions: tuple[int, ...] = (64, 128, 256, 512)
    pool_aggregation: Literal["mean", "max"] = "mean"
    # "unit": LayerNorm / sqrt(feature_dim) on both projections; "layer": LayerNorm only
    feature_norm: Literal["unit", "layer"] = "unit"
    bbox_embed_dim: int = 64
    adapter_hidden: int = 512
    attention_heads: int = 8
    fusion_hidden: int = 512
    cls_hidden: tuple[int, int] = (512, 256)
    energy_hidden: int = 128
    # meters -> decimeters before the first layer, keeps pre-activations O(1)
    point_scale: float = 10.0
    bbox_scale: float = 10.0

    @model_validator(mode="after")
    def _heads_divide(self):
        if self.feature_dim % self.attention_heads:
            raise ValueError("feature_dim must be divisible by attention_heads")
        return self

    def digest(self) -> str:
        """Architecture digest: changes iff the parameter layout can change."""
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class DistillWeights(_Strict):
    w_mse: float = Field(0.7, ge=0)
    w_cos: float = Field(0.2, ge=0)
    w_kl: float = Field(0.1, ge=0)
    temperature: float = Field(4.0, gt=0)
    kl_t2_scale: bool = False


class TaskWeights(_Strict):
    cls: float = Field(1.0, ge=0)
    reg: float = Field(0.1, ge=0)
    distill: float = Field(0.5, ge=0)
    gradnorm: bool = False
    gradnorm_alpha: float = 1.5
    gradnorm_lr: float = Field(0.025, gt=0)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.cls, self.reg, self.distill)


class TrainingConfig(_Strict):
    alpha: float = Field(0.3, ge=0, le=1)
    epochs: int = Field(25, ge=1)
    warmup_fraction: float = Field(0.10, ge=0, lt=1)
    lr_encoders: float = Field(1e-4, gt=0)
    lr_heads: float = Field(5e-4, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    micro_batch: int = Field(16, ge=1)
    accumulation_steps: int = Field(4, ge=1)
    clip_norm: float = Field(1.0, gt=0)
    div_start: float = Field(25.0, gt=0)
    div_final: float = Field(1e4, gt=0)
    label_smoothing: float = Field(0.05, ge=0, lt=1)
    huber_delta: float = Field(0.5, gt=0)
    seed: int = 0
    task_weights: TaskWeights = TaskWeights()
    distill: DistillWeights = DistillWeights()

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.accumulation_steps


class EvalConfig(_Strict):
    batch_size: int = Field(64, ge=1)
    seeds: tuple[int, ...] = (1, 2, 3)


class RunConfig(_Strict):
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    training: TrainingConfig = TrainingConfig()
    evaluation: EvalConfig = EvalConfig()

    @model_validator(mode="before")
    @classmethod
    def _sync_model_with_data(cls, values: Any):
        # class_count / n_points follow the data section unless set explicitly
        if not isinstance(values, dict):
            return values
        data = values.get("data") or {}
        model = values.get("model")
        if isinstance(data, BaseModel):
            data = data.model_dump()
        if isinstance(model, BaseModel):
            return values
        model = dict(model or {})
        for key in ("class_count", "n_points"):
            if key in data and key not in model:
                model[key] = data[key]
        return {**values, "model": model}

    @model_validator(mode="after")
    def _consistent(self):
        if self.model.class_count != self.data.class_count:
            raise ValueError(
                f"model.class_count={self.model.class_count} != data.class_count={self.data.class_count}"
            )
        return self


def _format_validation_error(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def validate(model_cls, data: dict):
    try:
        return model_cls.model_validate(data)
    except ValidationError as err:
        raise ConfigError(f"invalid configuration: {_format_validation_error(err)}") from None


def load_run_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Load a RunConfig from YAML/JSON and apply dotted-key overrides.

    ``overrides`` maps dotted paths (``"training.alpha"``) to values; ``None``
    values are ignored so unset CLI flags fall through to the file.
    """
    raw: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = yaml.safe_load(path.read_text())
        except yaml.YAMLError as err:
            raise ConfigError(f"cannot parse {path}: {err}") from None
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        raw = loaded
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = raw
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {dotted}: {p} is not a section")
        node[leaf] = value
    return validate(RunConfig, raw)


def dump_config(cfg: BaseModel) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)
