"""Per-round metrics, communication accounting, and report files.

The CSV schema is fixed and ordered:

    round,method,cosine,frob_gap,loss,up_bytes,down_bytes,epsilon,delta,sigma

and the JSON summary carries final fidelity (pre- and post-truncation),
the final privacy spend, and communication totals. All numbers are written
with shortest round-trip float formatting, so identical runs produce
byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .federation import SEED_BYTES
from .linalg import cosine_similarity, frobenius_norm

CSV_COLUMNS = (
    "round", "method", "cosine", "frob_gap", "loss",
    "up_bytes", "down_bytes", "epsilon", "delta", "sigma",
)

COMM_METHODS = ("fedask", "fedavg", "ffa", "scaffold", "flora")


@dataclass(frozen=True)
class RoundReport:
    """Quantitative surface of one federation round.

    ``fidelity_cosine`` compares the global update against the ideal mean of
    local updates; for the sketching method it is measured before rank
    truncation, with the post-truncation value reported separately.
    """

    round_index: int
    method: str
    fidelity_cosine: float
    fidelity_frobenius_gap: float
    task_loss: float
    uplink_bytes: float
    downlink_bytes: float
    epsilon: float | None = None
    delta: float | None = None
    sigma: float | None = None
    fidelity_cosine_post: float | None = None
    spectrum: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not -1.0 <= self.fidelity_cosine <= 1.0:
            raise ValueError(f"cosine out of range: {self.fidelity_cosine}")
        if self.uplink_bytes < 0 or self.downlink_bytes < 0:
            raise ValueError("byte counts must be >= 0")
        if any(
            self.spectrum[i] < self.spectrum[i + 1] - 1e-12
            for i in range(len(self.spectrum) - 1)
        ):
            raise ValueError("spectrum must be non-increasing")


@dataclass(frozen=True)
class CommModel:
    """Element-count communication model for one method.

    Counting rules (elements per client per round; bytes = elements *
    bytes_per_element, 2/1/0.5 for FP16/INT8/INT4):

      fedavg    up 2*d_l*r,            down 2*d_l*r        (both factors)
      ffa       up d_l*r,              down d_l*r          (b only)
      scaffold  up 4*d_l*r,            down 4*d_l*r        (factors + control variates)
      flora     up 2*d_l*r,            down 2*K_s*d_l*r    (server stacks all uplinks)
      fedask    up d_l*(r+p) + n*(r+p),
                down 2*d_l*r + d_l*(r+p) + seed             (pair, basis, seed)

    The test-matrix seed costs 8 bytes regardless of element width; set
    ``omega_as_matrix`` to charge the full n*(r+p) matrix instead.
    """

    method: str
    d_l: int
    rank: int
    over_sketch: int = 0
    cohort_size: int = 1
    bytes_per_element: float = 2.0
    n_dim: int | None = None
    omega_as_matrix: bool = False

    def __post_init__(self):
        if self.method not in COMM_METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {COMM_METHODS}")
        if min(self.d_l, self.rank, self.cohort_size) < 1 or self.over_sketch < 0:
            raise ValueError("dimensions must be positive (over_sketch >= 0)")
        if self.n_dim is None:
            object.__setattr__(self, "n_dim", self.d_l)


def comm_volume(model: CommModel) -> tuple[float, float]:
    """(uplink, downlink) bytes per client per round under the model."""
    bpe = model.bytes_per_element
    pair = 2 * model.d_l * model.rank
    width = model.rank + model.over_sketch
    if model.method == "fedavg":
        return pair * bpe, pair * bpe
    if model.method == "ffa":
        half = model.d_l * model.rank
        return half * bpe, half * bpe
    if model.method == "scaffold":
        return 2 * pair * bpe, 2 * pair * bpe
    if model.method == "flora":
        return pair * bpe, model.cohort_size * pair * bpe
    # double sketching
    up = (model.d_l * width + model.n_dim * width) * bpe
    omega_cost = model.n_dim * width * bpe if model.omega_as_matrix else SEED_BYTES
    down = pair * bpe + model.d_l * width * bpe + omega_cost
    return up, down


def fedask_downlink_without_basis(model: CommModel) -> float:
    """Downlink bytes when the broadcast basis is not charged.

    Published accounting often counts only the global pair on the downlink;
    both variants are emitted rather than forcing agreement.
    """
    if model.method != "fedask":
        raise ValueError("variant accounting applies to the sketching method only")
    bpe = model.bytes_per_element
    pair = 2 * model.d_l * model.rank
    omega_cost = (
        model.n_dim * (model.rank + model.over_sketch) * bpe
        if model.omega_as_matrix
        else SEED_BYTES
    )
    return pair * bpe + omega_cost


def comm_table(
    d_l: int, rank: int, over_sketch: int, cohort_size: int, bytes_per_element: float = 2.0
) -> list[dict]:
    """Per-method communication rows, with both sketching-method variants."""
    rows = []
    for method in COMM_METHODS:
        model = CommModel(
            method=method, d_l=d_l, rank=rank, over_sketch=over_sketch,
            cohort_size=cohort_size, bytes_per_element=bytes_per_element,
        )
        up, down = comm_volume(model)
        rows.append({
            "method": method, "uplink_bytes": up, "downlink_bytes": down,
            "total_bytes": up + down,
        })
        if method == "fedask":
            down_free = fedask_downlink_without_basis(model)
            rows.append({
                "method": "fedask_basis_free", "uplink_bytes": up,
                "downlink_bytes": down_free, "total_bytes": up + down_free,
            })
    return rows


def aggregation_fidelity(
    global_delta: np.ndarray, local_deltas: list[np.ndarray]
) -> tuple[float, float]:
    """Cosine and Frobenius gap between a global update and the local mean."""
    if not local_deltas:
        raise ValueError("need at least one local update")
    mean_local = sum(local_deltas) / len(local_deltas)
    gap = frobenius_norm(global_delta - mean_local) if np.any(global_delta - mean_local) else 0.0
    cos = cosine_similarity(global_delta, mean_local)
    return cos, gap


def _fmt(value) -> str:
    """Shortest round-trip formatting; empty for missing values."""
    if value is None:
        return ""
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def write_rounds_csv(reports: list[RoundReport], path: str | Path) -> Path:
    """One CSV row per round in the fixed column order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for rep in reports:
            writer.writerow([
                rep.round_index, rep.method, _fmt(rep.fidelity_cosine),
                _fmt(rep.fidelity_frobenius_gap), _fmt(rep.task_loss),
                _fmt(rep.uplink_bytes), _fmt(rep.downlink_bytes),
                _fmt(rep.epsilon), _fmt(rep.delta), _fmt(rep.sigma),
            ])
    return path


def summarize(reports: list[RoundReport], extra: dict | None = None) -> dict:
    """JSON-ready run summary: final fidelity, spend, and byte totals."""
    summary: dict = {"rounds": len(reports)}
    if reports:
        last = reports[-1]
        summary["final"] = {
            "round": last.round_index,
            "method": last.method,
            "cosine": last.fidelity_cosine,
            "cosine_post_truncation": last.fidelity_cosine_post,
            "frob_gap": last.fidelity_frobenius_gap,
            "loss": last.task_loss,
            "epsilon": last.epsilon,
            "delta": last.delta,
            "sigma": last.sigma,
        }
        summary["totals"] = {
            "uplink_bytes": sum(r.uplink_bytes for r in reports),
            "downlink_bytes": sum(r.downlink_bytes for r in reports),
        }
    if extra:
        summary.update(extra)
    return summary


def write_json(payload: dict, path: str | Path) -> Path:
    """Deterministic JSON file: sorted keys, fixed separators."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2, allow_nan=True) + "\n")
    return path


def emit_report(
    reports: list[RoundReport], out_dir: str | Path, extra: dict | None = None
) -> tuple[Path, Path]:
    """Write rounds.csv and summary.json under ``out_dir``."""
    out_dir = Path(out_dir)
    csv_path = write_rounds_csv(reports, out_dir / "rounds.csv")
    json_path = write_json(summarize(reports, extra), out_dir / "summary.json")
    return csv_path, json_path
