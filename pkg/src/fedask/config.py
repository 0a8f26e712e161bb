"""Experiment configuration: a single JSON document with dotted-path overrides.

Configs are pydantic models with strict field checking, so unknown keys and
bad values fail before any round runs, naming the offending field. A config
plus its seed fully determines every output byte of an experiment.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class TaskSettings(BaseModel):
    """Synthetic planted-regression task parameters.

    ``planted_alignment`` controls where the planted update's row space
    lives relative to the initial adapter: "adapter" keeps it inside the
    adapter's reachable span (the low-dimensional-update regime),
    "orthogonal" places it entirely outside (so a fixed input factor can
    never represent it), "random" leaves it unconstrained.
    ``subspace_inputs`` draws inputs inside the task-relevant subspace,
    which keeps every gradient row in-span.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    d_l: int = Field(default=64, ge=2)
    planted_rank: int = Field(default=2, ge=1)
    planted_scale: float = Field(default=1.0, gt=0)
    shift_magnitude: float = Field(default=0.6, ge=0)
    noise_level: float = Field(default=0.02, ge=0)
    components: int = Field(default=4, ge=1)
    samples_per_client: int = Field(default=128, ge=1)
    planted_alignment: Literal["adapter", "random", "orthogonal"] = "adapter"
    subspace_inputs: bool = True


class DPSettings(BaseModel):
    """Differential privacy settings; exactly one of sigma / target epsilon."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    clip: float = Field(default=1.0, gt=0)
    data_sampling_ratio: float = Field(default=0.5, gt=0, le=1)
    noise_multiplier: Optional[float] = Field(default=None, gt=0)
    target_epsilon: Optional[float] = Field(default=None, gt=0)
    delta: float = Field(default=1e-5, gt=0, lt=1)
    rdp_constant: float = Field(default=1.0, gt=0)
    calibration_constant: float = Field(default=1.0, gt=0)

    @model_validator(mode="after")
    def _exactly_one_noise_source(self) -> "DPSettings":
        if (self.noise_multiplier is None) == (self.target_epsilon is None):
            raise ValueError(
                "dp requires exactly one of noise_multiplier / target_epsilon"
            )
        return self


class ExperimentConfig(BaseModel):
    """Everything an experiment run depends on, seed included."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    method: Literal["fedask", "fedavg", "ffa"] = "fedask"
    clients: int = Field(default=10, ge=1)
    client_sampling: float = Field(default=0.2, gt=0, le=1)
    rounds: int = Field(default=200, ge=0)
    local_steps: int = Field(default=10, ge=1)
    learning_rate: float = Field(default=0.2, gt=0)
    batch_size: int = Field(default=8, ge=1)
    rank: int = Field(default=4, ge=1)
    adapter_alpha: float = Field(default=8.0, gt=0)
    over_sketch: int = Field(default=2, ge=0)
    dirichlet_alpha: Optional[float] = Field(default=0.1, gt=0)
    resample_omega: bool = False
    bytes_per_element: float = Field(default=2.0, gt=0)
    workers: int = Field(default=1, ge=1)
    seed: int = 0
    dp: Optional[DPSettings] = None
    task: TaskSettings = TaskSettings()
    output_dir: Optional[str] = None

    @model_validator(mode="after")
    def _consistent_dimensions(self) -> "ExperimentConfig":
        if self.rank > self.task.d_l:
            raise ValueError("rank must not exceed task.d_l")
        if self.task.planted_rank > self.rank:
            raise ValueError("task.planted_rank must not exceed rank")
        if self.rank + self.over_sketch > self.task.d_l:
            raise ValueError("rank + over_sketch must not exceed task.d_l")
        return self

    @property
    def expected_cohort_size(self) -> int:
        return max(1, round(self.client_sampling * self.clients))

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2)


class ConfigError(ValueError):
    """Configuration could not be parsed or validated; message names the field."""


def _parse_override_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``key.path=value`` overrides onto a config dict.

    Values parse as JSON when possible (numbers, booleans, null, lists),
    otherwise as strings. Paths address nested objects with dots.
    """
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            nxt = node.get(part)
            if nxt is None:
                nxt = {}
                node[part] = nxt
            if not isinstance(nxt, dict):
                raise ConfigError(f"override path {key!r} passes through non-object {part!r}")
            node = nxt
        node[parts[-1]] = _parse_override_value(raw.strip())
    return data


def config_from_dict(data: dict) -> ExperimentConfig:
    from pydantic import ValidationError

    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        locations = ", ".join(
            ".".join(str(p) for p in err["loc"]) or "<root>" for err in exc.errors()
        )
        raise ConfigError(f"invalid configuration field(s): {locations}") from exc


def load_config(path: str | Path, overrides: list[str] | None = None) -> ExperimentConfig:
    """Read a JSON config file and apply CLI overrides."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config document must be a JSON object")
    if overrides:
        data = apply_overrides(data, overrides)
    return config_from_dict(data)
