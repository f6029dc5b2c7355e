"""JSON run configuration for the command line."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .data import ImageDataset, find_cifar10, load_cifar10, synthetic_dataset
from .errors import ConfigError
from .models import ModelSpec
from .shake import ShakeConfig
from .train import TrainConfig, WarmStart


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Section):
    family: str = "shake_resnet"
    depth: int = 14
    base_width: int = Field(32, ge=1)
    num_classes: int = Field(10, ge=2)


class ShakeSection(_Section):
    forward: str = "shake"
    backward: str = "shake"
    level: str = "image"
    alpha_lo: float = Field(0.0, ge=0.0, le=1.0)
    alpha_hi: float = Field(1.0, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _interval(self):
        if self.alpha_lo > self.alpha_hi:
            raise ValueError(f"alpha_lo ({self.alpha_lo}) must not exceed alpha_hi ({self.alpha_hi})")
        return self


class WarmStartSection(_Section):
    lr: float = Field(gt=0)
    epochs: int = Field(ge=0)


class TrainSection(_Section):
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(128, ge=1)
    lr0: float = Field(0.2, gt=0)
    warm_start: WarmStartSection | None = None
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(1e-4, ge=0)
    seed: int = 0
    precision: Literal["single", "double"] = "single"
    deterministic: bool = True
    eval_batch_size: int = Field(256, ge=1)


class DataSection(_Section):
    source: Literal["synthetic", "cifar10"] = "synthetic"
    path: str | None = None
    subset_size: int | None = Field(None, ge=1)
    test_subset_size: int | None = Field(None, ge=1)
    augment: bool = True
    n_train: int = Field(512, ge=1)
    n_test: int = Field(256, ge=1)
    image_size: int = Field(32, ge=4)
    synthetic_seed: int = 0

    @model_validator(mode="after")
    def _path(self):
        if self.source == "cifar10" and not self.path:
            raise ValueError("path is required when source is 'cifar10'")
        return self


class RunConfig(_Section):
    model: ModelSection = ModelSection()
    shake: ShakeSection = ShakeSection()
    train: TrainSection = TrainSection()
    data: DataSection = DataSection()
    output_dir: str = "runs/default"

    def shake_config(self) -> ShakeConfig:
        return ShakeConfig(**self.shake.model_dump())

    def model_spec(self) -> ModelSpec:
        return ModelSpec(shake=self.shake_config(), **self.model.model_dump())

    def train_config(self) -> TrainConfig:
        d = self.train.model_dump()
        ws = d.pop("warm_start")
        return TrainConfig(warm_start=WarmStart(**ws) if ws else None, **d)

    def resolved(self) -> dict:
        return self.model_dump(mode="json")


def _field_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def parse_run_config(raw: dict) -> RunConfig:
    """Validate ``raw`` against the schema and every module precondition."""
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_field_errors(exc)) from None
    for section, build in (("shake", cfg.shake_config), ("model", cfg.model_spec), ("train", cfg.train_config)):
        try:
            build()
        except ConfigError as exc:
            raise ConfigError(f"{section}: {exc}") from None
    return cfg


def load_run_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return parse_run_config(raw)


def load_datasets(data: DataSection, num_classes: int) -> tuple[ImageDataset, ImageDataset]:
    if data.source == "synthetic":
        full = synthetic_dataset(num_classes, data.n_train + data.n_test, data.synthetic_seed, data.image_size)
        train = ImageDataset(full.images[: data.n_train], full.labels[: data.n_train], num_classes)
        test = ImageDataset(full.images[data.n_train :], full.labels[data.n_train :], num_classes)
    else:
        root = find_cifar10(data.path)
        if root is None:
            raise ConfigError(f"data.path: no CIFAR-10 binaries (data_batch_1.bin, test_batch.bin) under {data.path}")
        train, test = load_cifar10(root)
    return train.subset(data.subset_size), test.subset(data.test_subset_size)
