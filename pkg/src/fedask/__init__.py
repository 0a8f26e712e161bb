"""Differentially private federated low-rank adaptation with double sketching.

Core library (linalg, adapter, privacy, federation, metrics), experiment
orchestration, a FastAPI service wrapping it, and a CLI thin client.
"""

from .adapter import (
    AdapterPair,
    ClientDataset,
    TaskSpec,
    delta_w,
    generate_federated_task,
    init_adapter,
    lora_gradients,
    loss_and_grad_w,
)
from .config import DPSettings, ExperimentConfig, TaskSettings, load_config
from .federation import (
    ClientState,
    ServerState,
    SketchMessage,
    range_finder_error_bound,
    run_round_fedask,
    run_round_fedavg,
    run_round_ffa,
    sample_clients,
    server_basis,
    server_reconstruct,
    sketch_phase1,
    sketch_phase2,
)
from .linalg import RngStream, SvdResult, cosine_similarity, frobenius_norm, gaussian_matrix, matmul, qr, svd
from .metrics import CommModel, RoundReport, aggregation_fidelity, comm_volume, emit_report
from .privacy import (
    DPConfig,
    NoisePowerBreakdown,
    PrivacySpend,
    advanced_composition,
    calibrate_sigma,
    compose_rdp,
    dp_local_step,
    empirical_noise_power,
    end_to_end_spend,
    optimal_rdp_order,
    predicted_noise_power,
    rdp_subsampled_gaussian,
    rdp_to_dp,
    subsample_amplify,
)

__version__ = "0.1.0"
