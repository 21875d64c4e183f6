"""Experiment configuration: strict JSON records shared by all subcommands."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import __version__


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    K: int = Field(3, ge=1)
    alpha: float = Field(2.0, gt=0)
    d: int = Field(4000, ge=1)
    # zero is accepted so that the solver can report non-convergence
    lambda0: float = Field(1.0, ge=0)
    seed: int = Field(0, ge=0)
    mc_samples: int = Field(200_000, ge=1)
    mc_blocks: int = Field(8, ge=1)
    t_max: int = Field(15, ge=1)
    damping: float = Field(0.5, gt=0, le=1)
    tol: float = Field(1e-6, gt=0)
    max_iter: int = Field(1000, ge=1)
    prox_tol: float = Field(1e-12, gt=0)
    solver_tol: float = Field(1e-8, gt=0)
    pd_pivot_tol: float = Field(1e-12, gt=0)
    problem: Literal["softmax", "squared"] = "softmax"
    engine: Literal["direct", "dice"] = "direct"
    lambda0_grid: tuple[float, ...] = (1.0, 0.3, 0.1)
    exact_overlap: bool = True
    q_schedule: Literal["fixed", "se"] = "fixed"
    output_path: str | None = None

    @field_validator("lambda0_grid")
    @classmethod
    def _grid_positive(cls, v):
        if not v or any(x <= 0 for x in v):
            raise ValueError("all grid values must be positive")
        return v

    @model_validator(mode="after")
    def _dims(self):
        if self.d < self.K:
            raise ValueError(f"d must be >= K (d={self.d}, K={self.K})")
        return self

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form, excluding the output path."""
        payload = self.model_dump(exclude={"output_path"})
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def header(self) -> str:
        return f"nsamp {__version__} config_sha256={self.digest()}"


def _format_error(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "config"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Read a JSON config (optional) and apply non-None overrides."""
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config: top level must be a JSON object")
    for k, v in (overrides or {}).items():
        if v is not None:
            data[k] = v
    try:
        return ExperimentConfig(**data)
    except ValidationError as exc:
        raise ConfigError(_format_error(exc)) from exc
