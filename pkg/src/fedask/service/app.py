"""FastAPI service exposing the simulator.

Endpoints take the same JSON config document the CLI reads from disk.
Validation failures come back as 422 with the offending field; a round that
stays mathematically degenerate through its retries returns 500 with
error = "degenerate-math".
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import experiments
from ..config import ConfigError, ExperimentConfig
from .schemas import (
    AccountResponse,
    FidelityGridRequest,
    FidelityGridResponse,
    NoiseStudyRequest,
    NoiseStudyResponse,
    RoundRecord,
    RunResponse,
)


def _round_records(result: experiments.ExperimentResult) -> list[RoundRecord]:
    return [
        RoundRecord(
            round=rep.round_index,
            method=rep.method,
            cosine=rep.fidelity_cosine,
            frob_gap=rep.fidelity_frobenius_gap,
            loss=rep.task_loss,
            up_bytes=rep.uplink_bytes,
            down_bytes=rep.downlink_bytes,
            epsilon=rep.epsilon,
            delta=rep.delta,
            sigma=rep.sigma,
            cosine_post=rep.fidelity_cosine_post,
            spectrum=list(rep.spectrum),
        )
        for rep in result.reports
    ]


def create_app() -> FastAPI:
    app = FastAPI(title="fedask", version="0.1.0")

    @app.exception_handler(ConfigError)
    async def _config_error(request: Request, exc: ConfigError):
        return JSONResponse(status_code=422, content={"error": "config", "detail": str(exc)})

    @app.exception_handler(experiments.DegenerateMathError)
    async def _degenerate(request: Request, exc: experiments.DegenerateMathError):
        return JSONResponse(
            status_code=500, content={"error": "degenerate-math", "detail": str(exc)}
        )

    @app.get("/healthz")
    def healthz() -> dict:
        return {"status": "ok"}

    @app.post("/run", response_model=RunResponse)
    def run(config: ExperimentConfig) -> RunResponse:
        result = experiments.run_experiment(config)
        return RunResponse(rounds=_round_records(result), summary=result.summary)

    @app.post("/account", response_model=AccountResponse)
    def account(config: ExperimentConfig) -> AccountResponse:
        if config.dp is None:
            raise ConfigError("invalid configuration field(s): dp (required for accounting)")
        return AccountResponse(**experiments.account_only(config))

    @app.post("/fidelity-grid", response_model=FidelityGridResponse)
    def grid(request: FidelityGridRequest) -> FidelityGridResponse:
        result = experiments.fidelity_grid(
            seed=request.seed,
            cohorts=tuple(request.cohorts),
            alphas=tuple(request.alphas),
            local_steps=request.local_steps,
        )
        return FidelityGridResponse(**result)

    @app.post("/noise-study", response_model=NoiseStudyResponse)
    def noise(request: NoiseStudyRequest) -> NoiseStudyResponse:
        result = experiments.noise_study(
            seed=request.seed,
            sigmas=tuple(request.sigmas),
            mc_trials=request.mc_trials,
            training_sigmas=tuple(request.training_sigmas),
            training_rounds=request.training_rounds,
        )
        return NoiseStudyResponse(**result)

    return app


app = create_app()
