"""Pydantic request/response models for the simulation service."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, ConfigDict

from ..config import ExperimentConfig  # noqa: F401  (request body model)


class RoundRecord(BaseModel):
    """One federation round, mirroring the CSV schema plus JSON-only extras."""

    model_config = ConfigDict(extra="forbid")

    round: int
    method: str
    cosine: float
    frob_gap: float
    loss: float
    up_bytes: float
    down_bytes: float
    epsilon: Optional[float] = None
    delta: Optional[float] = None
    sigma: Optional[float] = None
    cosine_post: Optional[float] = None
    spectrum: list[float] = []


class RunResponse(BaseModel):
    rounds: list[RoundRecord]
    summary: dict


class AccountResponse(BaseModel):
    epsilon: float
    delta: float
    alpha_opt: float
    sigma: float
    per_round_epsilon: float
    delta_per_round: float
    rounds: int
    cohort_rdp_division: int
    degenerate_order: bool
    target_epsilon: Optional[float] = None
    config_digest: str


class FidelityGridRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    cohorts: list[int] = [2, 5, 10, 15, 20]
    alphas: list[Optional[float]] = [0.1, 0.5, 0.8, 1.0, None]
    local_steps: int = 30


class GridCell(BaseModel):
    cohort: int
    hetero: str
    fedask_cosine: float
    fedask_cosine_post: float
    fedavg_cosine: float
    fedavg_frob_gap: float


class FidelityGridResponse(BaseModel):
    seed: int
    local_steps: int
    cells: list[GridCell]
    fedask_min_cosine: float
    fedavg_median_cosine: float
    fedavg_min_cosine: float
    fedavg_max_cosine: float


class NoiseStudyRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    sigmas: list[float] = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0]
    mc_trials: int = 20000
    training_sigmas: list[float] = [0.0, 0.5, 2.0]
    training_rounds: int = 10


class PowerRow(BaseModel):
    sigma: float
    scheme: str
    predicted_linear: float
    predicted_quadratic: float
    predicted_total: float
    empirical: float


class TrainingRow(BaseModel):
    sigma: float
    loss_both: float
    loss_b_only: float


class NoiseStudyResponse(BaseModel):
    seed: int
    instance: dict
    power: list[PowerRow]
    ratio_slope_empirical: float
    ratio_slope_predicted: float
    training: list[TrainingRow]


class ErrorBody(BaseModel):
    error: str
    detail: str
