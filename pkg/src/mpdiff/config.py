"""Strictly parsed run configuration (JSON)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .diffusion import NoiseSchedule, SamplerConfig
from .ema import gamma_from_sigma_rel
from .net import DenoiserConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataSection(_Strict):
    train: str
    test: Optional[str] = None


class ScheduleSection(_Strict):
    sigma_data: Optional[float] = Field(None, gt=0, description="estimated from the training set when null")
    p_mean: float = -1.2
    p_std: float = Field(1.2, gt=0)
    sigma_min: float = Field(0.002, gt=0)
    sigma_max: float = Field(20.0, gt=0)
    rho: float = Field(7.0, gt=0)

    def build(self, sigma_data: float) -> NoiseSchedule:
        return NoiseSchedule(sigma_data=sigma_data, p_mean=self.p_mean, p_std=self.p_std,
                             sigma_min=self.sigma_min, sigma_max=self.sigma_max, rho=self.rho)


class OptimizerSection(_Strict):
    lr: float = Field(0.005, gt=0)
    warmup_fraction: float = Field(0.05, ge=0, le=1)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.99, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)


class EmaSection(_Strict):
    sigma_rels: tuple[float, ...] = (0.05, 0.10)
    snapshots: int = Field(32, ge=1, description="snapshots per run, evenly spaced")

    @field_validator("sigma_rels")
    @classmethod
    def _check_sigma_rels(cls, v):
        if not v:
            raise ValueError("at least one sigma_rel is required")
        for s in v:
            gamma_from_sigma_rel(s)
        return v


class SamplerSection(_Strict):
    steps: int = Field(32, ge=1)

    def build(self) -> SamplerConfig:
        return SamplerConfig(steps=self.steps)


class RunConfig(_Strict):
    data: DataSection
    model: dict = Field(default_factory=dict)
    schedule: ScheduleSection = ScheduleSection()
    optimizer: OptimizerSection = OptimizerSection()
    batch_size: int = Field(32, ge=1)
    total_samples: int = Field(640_000, ge=1)
    ema: EmaSection = EmaSection()
    sampler: SamplerSection = SamplerSection()
    seed: int = Field(0, ge=0)
    out_dir: str = "run"

    @field_validator("model")
    @classmethod
    def _check_model(cls, v):
        try:
            DenoiserConfig(**v)
        except TypeError as exc:
            raise ValueError(str(exc)) from None
        return v

    @model_validator(mode="after")
    def _check_schedule(self):
        if self.schedule.sigma_min >= self.schedule.sigma_max:
            raise ValueError("schedule: sigma_min must be below sigma_max")
        if self.total_samples < self.batch_size:
            raise ValueError("total_samples must cover at least one batch")
        return self

    @property
    def denoiser(self) -> DenoiserConfig:
        return DenoiserConfig(**self.model)

    @property
    def total_steps(self) -> int:
        return self.total_samples // self.batch_size

    @property
    def warmup_steps(self) -> int:
        return int(round(self.optimizer.warmup_fraction * self.total_steps))

    @property
    def snapshot_every(self) -> int:
        return max(1, self.total_steps // self.ema.snapshots)

    def resolve(self, base: Path) -> "RunConfig":
        """Copy with relative paths anchored at ``base``."""
        fix = lambda p: p if p is None or Path(p).is_absolute() else str(base / p)  # noqa: E731
        data = self.data.model_copy(update={"train": fix(self.data.train), "test": fix(self.data.test)})
        return self.model_copy(update={"data": data, "out_dir": fix(self.out_dir)})


def load_config(path: str | Path) -> RunConfig:
    """Parse a JSON config file; relative paths resolve against its directory."""
    path = Path(path)
    with open(path) as fh:
        raw = json.load(fh)
    return RunConfig.model_validate(raw).resolve(path.resolve().parent)
