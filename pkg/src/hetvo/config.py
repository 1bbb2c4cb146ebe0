"""Run configuration: one JSON document validated against a strict schema.

Unknown keys anywhere in the document are rejected.  Command-line flags
override individual fields after the file is loaded.
"""

from __future__ import annotations

import json
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .exceptions import ConfigError
from .metrics import DEFAULT_FRACTIONS
from .posegraph import DEFAULT_LOOP_SCALE, LMConfig
from .regressor import TrainConfig
from .synthetic import NoiseModelSpec, TrajectorySpec


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=False)


class Seeds(_Strict):
    data: Optional[int] = Field(None, ge=0)
    train: Optional[int] = Field(None, ge=0)


class Paths(_Strict):
    samples: Optional[str] = None
    validation: Optional[str] = None
    model: Optional[str] = None
    predictions: Optional[str] = None
    output: Optional[str] = None


class NoiseSection(_Strict):
    kind: Literal["constant", "linear", "smooth-nonlinear"] = "linear"
    error_mode: Literal["right", "left"] = "right"
    zero_noise: bool = False
    mean_offset: Optional[list[float]] = None
    logvar_offset: Optional[list[float]] = None
    texture_step_std: float = Field(0.25, gt=0)

    def build(self) -> NoiseModelSpec:
        if self.zero_noise:
            return NoiseModelSpec.zero()
        return NoiseModelSpec(
            kind=self.kind,
            mean_offset=self.mean_offset,
            logvar_offset=self.logvar_offset,
            texture_step_std=self.texture_step_std,
        )


class TrajectorySection(_Strict):
    length: int = Field(1000, ge=2)
    speed_min: float = Field(0.5, gt=0)
    speed_max: float = Field(2.0, gt=0)
    heading_rate_std: float = Field(0.004, ge=0)

    def build(self) -> TrajectorySpec:
        try:
            return TrajectorySpec(length=self.length, speed_range=(self.speed_min, self.speed_max), heading_rate_std=self.heading_rate_std)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


class TrainSection(_Strict):
    learning_rate: float = Field(1e-4, gt=0)
    batch_size: int = Field(32, ge=1)
    max_epochs: int = Field(200, ge=1)
    patience: int = Field(20, ge=1)
    dropout: float = Field(0.1, ge=0, lt=1)
    hidden: list[int] = [64, 256]
    zero_mean: bool = False
    validation_fraction: float = Field(0.1, gt=0, lt=1)

    @field_validator("hidden")
    @classmethod
    def _positive(cls, v):
        if not v or min(v) < 1:
            raise ValueError("hidden layer widths must be positive")
        return v


class LMSection(_Strict):
    max_iterations: int = Field(100, ge=1)
    initial_lambda: float = Field(1e-4, gt=0)
    lambda_up: float = Field(10.0, gt=1)
    lambda_down: float = Field(0.1, gt=0, lt=1)
    rel_tol: float = Field(1e-9, ge=0)
    grad_tol: float = Field(1e-12, ge=0)
    jacobian: Literal["analytic", "numeric"] = "analytic"

    def build(self) -> LMConfig:
        return LMConfig(**self.model_dump())


class RunConfig(_Strict):
    seeds: Seeds = Seeds()
    paths: Paths = Paths()
    noise: NoiseSection = NoiseSection()
    trajectory: TrajectorySection = TrajectorySection()
    train: TrainSection = TrainSection()
    cov_kind: Literal["ldl", "chol"] = "ldl"
    fractions: list[float] = list(DEFAULT_FRACTIONS)
    lm: LMSection = LMSection()
    loop_scale: float = Field(DEFAULT_LOOP_SCALE, gt=0)

    @field_validator("fractions")
    @classmethod
    def _fractions(cls, v):
        if not v or any(not 0 < f <= 1 for f in v):
            raise ValueError("fractions must be non-empty and lie in (0, 1]")
        return v

    def train_config(self, seed: int) -> TrainConfig:
        t = self.train
        return TrainConfig(
            learning_rate=t.learning_rate,
            batch_size=t.batch_size,
            max_epochs=t.max_epochs,
            patience=t.patience,
            seed=seed,
            dropout_rate=t.dropout,
            hidden=tuple(t.hidden),
            cov_kind=self.cov_kind,
            zero_mean=t.zero_mean,
        )


def _explain(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def load_config(path=None, overrides=None) -> RunConfig:
    """Validate a JSON file (or an empty document) and apply dotted overrides.

    ``overrides`` maps dotted keys such as ``"train.learning_rate"`` to
    values; ``None`` values are skipped so unset flags leave the file alone.
    """
    data = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = data
        *head, leaf = key.split(".")
        for part in head:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override '{key}': '{part}' is not a section")
        node[leaf] = value
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_explain(exc)) from None
