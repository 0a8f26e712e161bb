"""Experiment orchestration: full runs, the fidelity grid, the noise study.

Everything in here is a pure function of (config, seed): random streams are
addressed by purpose, cohorts and rounds are replayable, and the emitted
reports are byte-stable across re-runs.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .adapter import (
    AdapterPair,
    ClientDataset,
    TaskSpec,
    delta_w,
    generate_federated_task,
    init_adapter,
    loss_and_grad_w,
)
from .config import ExperimentConfig, TaskSettings
from .federation import (
    ClientState,
    DegenerateBasisError,
    ServerState,
    run_round_fedask,
    run_round_fedavg,
    run_round_ffa,
    sample_clients,
)
from .linalg import RngStream, cosine_similarity, frobenius_norm
from .metrics import (
    CommModel,
    RoundReport,
    aggregation_fidelity,
    comm_table,
    comm_volume,
    fedask_downlink_without_basis,
    summarize,
)
from .privacy import (
    DPConfig,
    calibrate_sigma,
    empirical_noise_power,
    empirical_projected_noise_power,
    end_to_end_spend,
    predicted_noise_power,
    predicted_projected_noise_power,
)

MAX_ROUND_RETRIES = 3

ROUND_RUNNERS = {
    "fedask": run_round_fedask,
    "fedavg": run_round_fedavg,
    "ffa": run_round_ffa,
}


class DegenerateMathError(RuntimeError):
    """A round stayed degenerate through every retry."""


@dataclass
class Environment:
    """Materialized experiment state: task, data, clients, server."""

    spec: TaskSpec
    datasets: list[ClientDataset]
    clients: list[ClientState]
    server: ServerState
    initial_pair: AdapterPair


def _row_basis(rows: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis (as rows) of the row space of ``rows``."""
    _, s, vt = np.linalg.svd(rows, full_matrices=False)
    keep = s > (s[0] * tol if s.size and s[0] > 0 else tol)
    return vt[keep]


def make_task_spec(task: TaskSettings, initial_pair: AdapterPair, rng: RngStream) -> TaskSpec:
    """Build the planted task relative to an initial adapter.

    The planted update is a rank-limited matrix of Frobenius norm
    ``planted_scale`` whose row space sits inside, outside, or independent of
    the adapter's initial row space depending on ``planted_alignment``.
    """
    d = task.d_l
    adapter_rows = _row_basis(initial_pair.a)
    if task.planted_alignment == "adapter":
        mix = rng.standard_normal((task.planted_rank, adapter_rows.shape[0]))
        v_rows = _row_basis(mix @ adapter_rows)
    elif task.planted_alignment == "orthogonal":
        raw = rng.standard_normal((task.planted_rank, d))
        raw = raw - (raw @ adapter_rows.T) @ adapter_rows
        v_rows = _row_basis(raw)
    else:
        v_rows = _row_basis(rng.standard_normal((task.planted_rank, d)))
    left = rng.standard_normal((d, v_rows.shape[0]))
    planted = left @ v_rows
    planted = task.planted_scale * planted / frobenius_norm(planted)

    if task.subspace_inputs:
        stacked = np.vstack([initial_pair.a, v_rows])
        input_basis = _row_basis(stacked).T  # (n, d_sub), orthonormal columns
    else:
        input_basis = None

    w0 = rng.standard_normal((d, d)) / np.sqrt(d)
    return TaskSpec(
        w0=w0,
        planted_update=planted,
        shift_magnitude=task.shift_magnitude,
        noise_level=task.noise_level,
        num_components=task.components,
        input_basis=input_basis,
    )


def resolve_noise_multiplier(cfg: ExperimentConfig) -> float | None:
    """Explicit sigma, or the calibrated one for a target epsilon."""
    if cfg.dp is None:
        return None
    if cfg.dp.noise_multiplier is not None:
        return cfg.dp.noise_multiplier
    variance = calibrate_sigma(
        epsilon=cfg.dp.target_epsilon,
        delta=cfg.dp.delta,
        q_d=cfg.dp.data_sampling_ratio,
        local_steps=cfg.local_steps,
        q_k=cfg.client_sampling,
        rounds=max(1, cfg.rounds),
        num_clients=cfg.clients,
        constant=cfg.dp.calibration_constant,
    )
    return math.sqrt(variance)


def _dp_config(cfg: ExperimentConfig, sigma: float) -> DPConfig:
    return DPConfig(
        clip=cfg.dp.clip,
        noise_multiplier=sigma,
        data_sampling_ratio=cfg.dp.data_sampling_ratio,
        local_steps=cfg.local_steps,
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
    )


def build_environment(cfg: ExperimentConfig) -> Environment:
    """Materialize the initial adapter, task, datasets, and server state."""
    rng = RngStream(cfg.seed)
    pair0 = init_adapter(
        cfg.task.d_l, cfg.task.d_l, cfg.rank, cfg.adapter_alpha, rng.split("init")
    )
    spec = make_task_spec(cfg.task, pair0, rng.split("task"))
    datasets = generate_federated_task(
        spec, cfg.clients, cfg.task.samples_per_client, cfg.dirichlet_alpha,
        rng.split("data"),
    )
    sigma = resolve_noise_multiplier(cfg)
    dp = _dp_config(cfg, sigma) if sigma is not None else None
    clients = [
        ClientState(client_id=ds.client_id, pair=pair0, dataset=ds, dp=dp)
        for ds in datasets
    ]
    server = ServerState(
        pair=pair0,
        over_sketch=cfg.over_sketch,
        omega_seed=cfg.seed,
        resample_omega=cfg.resample_omega,
        client_ids=tuple(ds.client_id for ds in datasets),
    )
    return Environment(
        spec=spec, datasets=datasets, clients=clients, server=server, initial_pair=pair0
    )


def global_loss(env: Environment, pair: AdapterPair) -> float:
    """Mean task loss of a pair over all clients' full datasets."""
    losses = [loss_and_grad_w(env.spec.w0, pair, ds)[0] for ds in env.datasets]
    return float(np.mean(losses))


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    reports: list[RoundReport]
    summary: dict


def _config_digest(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(cfg.to_json().encode()).hexdigest()


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Execute the configured number of rounds and assemble all reports.

    A round whose sketch aggregate degenerates to zero is retried with a
    re-sampled cohort; persistence through every retry raises
    DegenerateMathError.
    """
    env = build_environment(cfg)
    rng = RngStream(cfg.seed)
    runner = ROUND_RUNNERS[cfg.method]
    sigma = resolve_noise_multiplier(cfg)
    use_dp = sigma is not None
    clients_by_id = {c.client_id: c for c in env.clients}
    server = env.server
    reports: list[RoundReport] = []

    for round_index in range(cfg.rounds):
        outcome = None
        for attempt in range(MAX_ROUND_RETRIES + 1):
            cohort_ids = sample_clients(
                server.client_ids, cfg.client_sampling,
                rng.split(round_index, attempt, "cohort"),
            )
            cohort = [clients_by_id[cid] for cid in cohort_ids]
            try:
                server, outcome = runner(
                    server, cohort, env.spec.w0, rng,
                    use_dp=use_dp,
                    local_steps=cfg.local_steps,
                    learning_rate=cfg.learning_rate,
                    batch_size=cfg.batch_size,
                    bytes_per_element=cfg.bytes_per_element,
                    workers=cfg.workers,
                )
                break
            except DegenerateBasisError:
                continue
        if outcome is None:
            raise DegenerateMathError(
                f"round {round_index} stayed degenerate after {MAX_ROUND_RETRIES} retries"
            )

        if outcome.pre_truncation_delta is not None:
            cos, gap = aggregation_fidelity(
                outcome.pre_truncation_delta, outcome.local_deltas
            )
            cos_post, _ = aggregation_fidelity(outcome.global_delta, outcome.local_deltas)
        else:
            cos, gap = aggregation_fidelity(outcome.global_delta, outcome.local_deltas)
            cos_post = None

        if use_dp:
            account = end_to_end_spend(
                _dp_config(cfg, sigma), cfg.client_sampling, round_index + 1,
                cfg.expected_cohort_size, cfg.dp.delta, cfg.dp.rdp_constant,
            )
            eps, dlt = account.spend.epsilon, account.spend.delta
        else:
            eps = dlt = None

        reports.append(
            RoundReport(
                round_index=round_index,
                method=cfg.method,
                fidelity_cosine=cos,
                fidelity_frobenius_gap=gap,
                task_loss=global_loss(env, server.pair),
                uplink_bytes=outcome.uplink_bytes_per_client,
                downlink_bytes=outcome.downlink_bytes_per_client,
                epsilon=eps,
                delta=dlt,
                sigma=sigma,
                fidelity_cosine_post=cos_post,
                spectrum=tuple(float(v) for v in outcome.spectrum)
                if outcome.spectrum is not None
                else (),
            )
        )

    extra: dict = {
        "method": cfg.method,
        "seed": cfg.seed,
        "config_digest": _config_digest(cfg),
        "communication_model": comm_table(
            cfg.task.d_l, cfg.rank, cfg.over_sketch, cfg.expected_cohort_size,
            cfg.bytes_per_element,
        ),
    }
    if use_dp:
        account = end_to_end_spend(
            _dp_config(cfg, sigma), cfg.client_sampling, max(1, cfg.rounds),
            cfg.expected_cohort_size, cfg.dp.delta, cfg.dp.rdp_constant,
        )
        extra["privacy"] = account.to_json_dict()
    summary = summarize(reports, extra)
    return ExperimentResult(config=cfg, reports=reports, summary=summary)


def account_only(cfg: ExperimentConfig) -> dict:
    """Privacy spend of a configuration without running any training."""
    sigma = resolve_noise_multiplier(cfg)
    if sigma is None:
        raise ValueError("configuration has no dp section to account")
    account = end_to_end_spend(
        _dp_config(cfg, sigma), cfg.client_sampling, max(1, cfg.rounds),
        cfg.expected_cohort_size, cfg.dp.delta, cfg.dp.rdp_constant,
    )
    payload = account.to_json_dict()
    payload["target_epsilon"] = cfg.dp.target_epsilon
    payload["config_digest"] = _config_digest(cfg)
    return payload


# ---------------------------------------------------------------------------
# Fidelity grid
# ---------------------------------------------------------------------------

GRID_COHORTS = (2, 5, 10, 15, 20)
GRID_ALPHAS: tuple[float | None, ...] = (0.1, 0.5, 0.8, 1.0, None)  # None = IID
GRID_LOCAL_STEPS = 30


def _grid_cell_config(seed: int, cohort: int, alpha: float | None) -> ExperimentConfig:
    return ExperimentConfig(
        method="fedask",
        clients=cohort,
        client_sampling=1.0,
        rounds=1,
        local_steps=GRID_LOCAL_STEPS,
        over_sketch=0,
        dirichlet_alpha=alpha,
        seed=seed,
    )


def fidelity_grid(
    seed: int = 0,
    cohorts: tuple[int, ...] = GRID_COHORTS,
    alphas: tuple[float | None, ...] = GRID_ALPHAS,
    local_steps: int = GRID_LOCAL_STEPS,
) -> dict:
    """Aggregation fidelity over cohort size x heterogeneity, one round each.

    Every cell trains the same clients once (no sketching noise involved at
    zero over-sketch), then aggregates the identical local updates through
    both the double-sketch reconstruction and factor-wise averaging, so the
    two fidelities are directly comparable.
    """
    cells = []
    for i, cohort in enumerate(cohorts):
        for j, alpha in enumerate(alphas):
            base = _grid_cell_config(seed, cohort, alpha)
            cfg = base.model_copy(update={"local_steps": local_steps})
            cell_seed_rng = RngStream(seed).split("grid", i, j)
            cfg = cfg.model_copy(update={"seed": int(cell_seed_rng.integers(0, 2**62))})
            env = build_environment(cfg)
            rng = RngStream(cfg.seed)
            cohort_clients = list(env.clients)
            _, sketch_outcome = run_round_fedask(
                env.server, cohort_clients, env.spec.w0, rng,
                use_dp=False, local_steps=cfg.local_steps,
                learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
            )
            # Re-average the very same trained pairs factor-wise.
            ordered = sorted(cohort_clients, key=lambda c: c.client_id)
            avg_pair = env.server.pair.with_factors(
                a=sum(c.pair.a for c in ordered) / len(ordered),
                b=sum(c.pair.b for c in ordered) / len(ordered),
            )
            sketch_cos, _ = aggregation_fidelity(
                sketch_outcome.pre_truncation_delta, sketch_outcome.local_deltas
            )
            sketch_cos_post, _ = aggregation_fidelity(
                sketch_outcome.global_delta, sketch_outcome.local_deltas
            )
            avg_cos, avg_gap = aggregation_fidelity(
                delta_w(avg_pair), sketch_outcome.local_deltas
            )
            cells.append({
                "cohort": cohort,
                "hetero": "iid" if alpha is None else repr(float(alpha)),
                "fedask_cosine": sketch_cos,
                "fedask_cosine_post": sketch_cos_post,
                "fedavg_cosine": avg_cos,
                "fedavg_frob_gap": avg_gap,
            })
    fedask_values = [c["fedask_cosine"] for c in cells]
    fedavg_values = [c["fedavg_cosine"] for c in cells]
    return {
        "seed": seed,
        "local_steps": local_steps,
        "cells": cells,
        "fedask_min_cosine": min(fedask_values),
        "fedavg_median_cosine": float(np.median(fedavg_values)),
        "fedavg_min_cosine": min(fedavg_values),
        "fedavg_max_cosine": max(fedavg_values),
    }


# ---------------------------------------------------------------------------
# Noise study
# ---------------------------------------------------------------------------

STUDY_SIGMAS = (1.0, 2.0, 4.0, 8.0, 16.0, 32.0)


def noise_study(
    seed: int = 0,
    sigmas: tuple[float, ...] = STUDY_SIGMAS,
    mc_trials: int = 20000,
    d_l: int = 16,
    rank: int = 4,
    eta: float = 0.1,
    training_sigmas: tuple[float, ...] = (0.0, 0.5, 2.0),
    training_rounds: int = 10,
) -> dict:
    """Predicted vs empirical update-noise power, plus downstream loss.

    Scheme "both" perturbs both factor gradients (noise interacts
    quadratically); scheme "b_only" perturbs only the output factor through
    the projected update (noise stays linear in sigma^2). Training runs use
    the sketch-aggregation pipeline in both schemes so that at sigma = 0 the
    trajectories coincide exactly.
    """
    rng = RngStream(seed)
    a = rng.split("instance").standard_normal((rank, d_l))
    b = rng.split("instance", 1).standard_normal((d_l, rank))
    clip = 1.0
    batch = 1

    power_rows = []
    for sigma in sigmas:
        pred = predicted_noise_power(a, b, eta, sigma, clip, batch, d_l, rank)
        emp = empirical_noise_power(
            a, b, eta, sigma, clip, batch, mc_trials, rng.split("mc-both", int(sigma * 1000))
        )
        power_rows.append({
            "sigma": sigma, "scheme": "both",
            "predicted_linear": pred.linear_term,
            "predicted_quadratic": pred.quadratic_term,
            "predicted_total": pred.total_predicted,
            "empirical": emp,
        })
        pred_b = predicted_projected_noise_power(a, eta, sigma, clip, batch)
        emp_b = empirical_projected_noise_power(
            a, eta, sigma, clip, mc_trials, rng.split("mc-bonly", int(sigma * 1000)), batch
        )
        power_rows.append({
            "sigma": sigma, "scheme": "b_only",
            "predicted_linear": pred_b,
            "predicted_quadratic": 0.0,
            "predicted_total": pred_b,
            "empirical": emp_b,
        })

    # Ratio slope in the large-sigma regime: both/b_only grows linearly in
    # sigma^2 with slope (quadratic coefficient) / (b_only coefficient).
    large = [s for s in sigmas if s >= 8.0] or list(sigmas[-3:])
    xs, ys = [], []
    for s in large:
        emp_both = next(r["empirical"] for r in power_rows if r["sigma"] == s and r["scheme"] == "both")
        emp_b = next(r["empirical"] for r in power_rows if r["sigma"] == s and r["scheme"] == "b_only")
        xs.append(s**2)
        ys.append(emp_both / emp_b)
    slope = float(np.polyfit(xs, ys, 1)[0]) if len(xs) >= 2 else float("nan")
    quad_coeff = eta**4 * (clip / batch) ** 4 * d_l**2 * rank  # of sigma^4
    bonly_coeff = predicted_projected_noise_power(a, eta, 1.0, clip, batch)  # of sigma^2
    predicted_slope = quad_coeff / bonly_coeff

    training_rows = []
    for sigma in training_sigmas:
        losses = {}
        for scheme in ("both", "b_only"):
            cfg = ExperimentConfig(
                method="fedask", clients=4, client_sampling=1.0,
                rounds=training_rounds, local_steps=5, over_sketch=2,
                dirichlet_alpha=None, seed=seed,
                learning_rate=0.1,
                dp=None if sigma == 0.0 else {
                    "clip": 1.0, "data_sampling_ratio": 1.0, "noise_multiplier": sigma,
                },
            )
            env = build_environment(cfg)
            run_rng = RngStream(cfg.seed)
            server = env.server
            for t in range(cfg.rounds):
                server, _ = run_round_fedask(
                    server, env.clients, env.spec.w0, run_rng,
                    use_dp=sigma > 0.0,
                    local_steps=cfg.local_steps,
                    learning_rate=cfg.learning_rate,
                    batch_size=cfg.batch_size,
                    dp_mode="both" if scheme == "both" else "b_only",
                )
            losses[scheme] = global_loss(env, server.pair)
        training_rows.append({
            "sigma": sigma,
            "loss_both": losses["both"],
            "loss_b_only": losses["b_only"],
        })

    return {
        "seed": seed,
        "instance": {"d_l": d_l, "rank": rank, "eta": eta, "clip": clip, "batch_size": batch},
        "power": power_rows,
        "ratio_slope_empirical": slope,
        "ratio_slope_predicted": predicted_slope,
        "training": training_rows,
    }


# ---------------------------------------------------------------------------
# Learnability separation
# ---------------------------------------------------------------------------


def learnability_separation(
    seed: int = 0,
    trials: int = 100,
    rounds: int = 30,
    local_steps: int = 5,
    d_l: int = 32,
    rank: int = 4,
    sigma: float = 0.0,
) -> dict:
    """Final-loss comparison on a task the fixed-a baseline cannot represent.

    The planted update's row space is orthogonal to the initial input
    factor, so updates of the form b @ a_init can never reduce the planted
    residual, while re-factorized global updates can rotate the input factor
    toward it. Both methods run with identical (sigma, rounds, steps).
    """
    wins = 0
    margins = []
    for trial in range(trials):
        trial_seed = int(RngStream(seed).split("separation", trial).integers(0, 2**62))
        base = dict(
            clients=4, client_sampling=1.0, rounds=rounds, local_steps=local_steps,
            learning_rate=0.1, batch_size=16, rank=rank, adapter_alpha=float(rank),
            over_sketch=2, dirichlet_alpha=None, seed=trial_seed,
            dp=None if sigma == 0.0 else {
                "clip": 1.0, "data_sampling_ratio": 1.0, "noise_multiplier": sigma,
            },
            task={
                "d_l": d_l, "planted_rank": 2, "planted_scale": 1.0,
                "shift_magnitude": 0.0, "noise_level": 0.0,
                "samples_per_client": 64, "planted_alignment": "orthogonal",
                "subspace_inputs": False,
            },
        )
        losses = {}
        for method in ("fedask", "ffa"):
            cfg = ExperimentConfig.model_validate({**base, "method": method})
            result = run_experiment(cfg)
            losses[method] = result.reports[-1].task_loss
        margin = losses["ffa"] - losses["fedask"]
        margins.append(margin)
        if margin > 0:
            wins += 1
    return {
        "seed": seed,
        "trials": trials,
        "wins": wins,
        "margin_mean": float(np.mean(margins)),
        "margin_min": float(np.min(margins)),
        "sigma": sigma,
    }
