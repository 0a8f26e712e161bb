"""Low-rank adapter pairs, their gradients, and the synthetic federated task.

An adapter pair (a, b) parameterizes a weight update (alpha / rank) * b @ a
added to frozen base weights. The training task is least-squares regression
onto a planted low-rank shift of the base weights: gradients are exact, the
optimum is known, and the update itself is low-rank, which is the regime the
aggregation protocol is designed for.

Client heterogeneity is a Dirichlet-weighted mixture over latent components,
each component owning its own shift direction on top of the planted update.
Smaller Dirichlet concentration means more skewed mixtures, i.e. stronger
non-IID behavior.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .linalg import (
    DegenerateInputError,
    RngStream,
    ShapeError,
    as_matrix,
    frobenius_norm,
)


@dataclass(frozen=True)
class AdapterPair:
    """LoRA factor pair: a is (rank x n), b is (m x rank), update (alpha/rank) b@a."""

    a: np.ndarray
    b: np.ndarray
    rank: int
    alpha: float

    def __post_init__(self):
        a = as_matrix(self.a, "a")
        b = as_matrix(self.b, "b")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if a.shape[0] != self.rank or b.shape[1] != self.rank:
            raise ShapeError(
                f"factor shapes {a.shape}, {b.shape} inconsistent with rank {self.rank}"
            )
        if self.rank > min(b.shape[0], a.shape[1]):
            raise ShapeError(
                f"rank {self.rank} exceeds min(m, n) = {min(b.shape[0], a.shape[1])}"
            )
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def out_dim(self) -> int:
        return self.b.shape[0]

    @property
    def in_dim(self) -> int:
        return self.a.shape[1]

    def with_factors(self, a: np.ndarray | None = None, b: np.ndarray | None = None) -> "AdapterPair":
        """Copy of this pair with one or both factors replaced."""
        return AdapterPair(
            a=self.a if a is None else a,
            b=self.b if b is None else b,
            rank=self.rank,
            alpha=self.alpha,
        )

    def fingerprint(self) -> bytes:
        """Byte-exact digest of both factors; changes iff either factor changes."""
        import hashlib

        h = hashlib.sha256()
        h.update(self.a.tobytes())
        h.update(self.b.tobytes())
        return h.digest()


def init_adapter(out_dim: int, in_dim: int, rank: int, alpha: float, rng: RngStream) -> AdapterPair:
    """Standard initialization: a ~ N(0, 1/n) entries, b = 0."""
    a = rng.standard_normal((rank, in_dim)) / np.sqrt(in_dim)
    b = np.zeros((out_dim, rank))
    return AdapterPair(a=a, b=b, rank=rank, alpha=alpha)


def delta_w(pair: AdapterPair) -> np.ndarray:
    """The weight update (alpha / rank) * b @ a."""
    return pair.scaling * (pair.b @ pair.a)


def lora_gradients(pair: AdapterPair, grad_w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Factor gradients from a weight-space gradient.

    grad_a = (alpha/rank) * b.T @ grad_w   (rank x n)
    grad_b = (alpha/rank) * grad_w @ a.T   (m x rank)
    """
    grad_w = as_matrix(grad_w, "grad_w")
    if grad_w.shape != (pair.out_dim, pair.in_dim):
        raise ShapeError(
            f"grad_w shape {grad_w.shape} does not match adapter ({pair.out_dim}, {pair.in_dim})"
        )
    grad_a = pair.scaling * (pair.b.T @ grad_w)
    grad_b = pair.scaling * (grad_w @ pair.a.T)
    return grad_a, grad_b


@dataclass(frozen=True)
class ClientDataset:
    """One client's regression samples.

    inputs is (N x n), targets is (N x m). ``components`` records which
    latent mixture component generated each sample and ``mixture_weights``
    the client's Dirichlet draw; both are metadata, not model inputs.
    """

    client_id: int
    inputs: np.ndarray
    targets: np.ndarray
    components: np.ndarray | None = None
    mixture_weights: np.ndarray | None = None

    def __post_init__(self):
        inputs = as_matrix(self.inputs, "inputs")
        targets = as_matrix(self.targets, "targets")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "targets", targets)
        if len(inputs) != len(targets):
            raise ShapeError(
                f"inputs and targets disagree in length: {len(inputs)} vs {len(targets)}"
            )

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, indices) -> "ClientDataset":
        indices = np.asarray(indices)
        return ClientDataset(
            client_id=self.client_id,
            inputs=self.inputs[indices],
            targets=self.targets[indices],
            components=None if self.components is None else self.components[indices],
            mixture_weights=self.mixture_weights,
        )


def loss_and_grad_w(
    w0: np.ndarray, pair: AdapterPair, batch: ClientDataset
) -> tuple[float, np.ndarray]:
    """Mean squared-error loss and its weight-space gradient on a batch.

    loss   = mean over samples of 0.5 * ||(w0 + dw) x - y||^2
    grad_w = mean over samples of ((w0 + dw) x - y) x^T
    """
    if len(batch) == 0:
        raise DegenerateInputError("empty batch")
    w0 = as_matrix(w0, "w0")
    w = w0 + delta_w(pair)
    residual = batch.inputs @ w.T - batch.targets  # (N, m)
    n_samples = len(batch)
    loss = 0.5 * float(np.sum(residual * residual)) / n_samples
    grad_w = residual.T @ batch.inputs / n_samples
    return loss, grad_w


@dataclass(frozen=True)
class TaskSpec:
    """Planted regression task shared by all clients.

    The optimum of the noiseless, shift-free task is w0 + planted_update.
    ``shift_magnitude`` scales per-component directions layered on the
    planted update (the heterogeneity source); ``noise_level`` is the label
    noise standard deviation. When ``input_basis`` is set (n x d, orthonormal
    columns), inputs are drawn inside that subspace, confining every gradient
    row to it; this realizes the low-dimensional-update regime the sketching
    protocol targets.
    """

    w0: np.ndarray
    planted_update: np.ndarray
    shift_magnitude: float = 0.0
    noise_level: float = 0.0
    num_components: int = 4
    input_basis: np.ndarray | None = None

    def __post_init__(self):
        w0 = as_matrix(self.w0, "w0")
        planted = as_matrix(self.planted_update, "planted_update")
        object.__setattr__(self, "w0", w0)
        object.__setattr__(self, "planted_update", planted)
        if planted.shape != w0.shape:
            raise ShapeError(
                f"planted_update shape {planted.shape} differs from w0 {w0.shape}"
            )
        if self.shift_magnitude < 0 or self.noise_level < 0:
            raise ValueError("shift_magnitude and noise_level must be non-negative")
        if self.num_components < 1:
            raise ValueError("num_components must be >= 1")
        if self.input_basis is not None:
            basis = as_matrix(self.input_basis, "input_basis")
            object.__setattr__(self, "input_basis", basis)
            if basis.shape[0] != w0.shape[1]:
                raise ShapeError(
                    f"input_basis rows {basis.shape[0]} must equal input dim {w0.shape[1]}"
                )

    @property
    def out_dim(self) -> int:
        return self.w0.shape[0]

    @property
    def in_dim(self) -> int:
        return self.w0.shape[1]


def _component_directions(spec: TaskSpec, rng: RngStream) -> list[np.ndarray]:
    """Unit-Frobenius shift directions, one per latent component.

    Directions reuse the planted update's row space so heterogeneity stays
    inside the same low-dimensional subspace as the signal. Falls back to
    dense random directions when the planted update is zero.
    """
    m, n = spec.out_dim, spec.in_dim
    norm_planted = frobenius_norm(spec.planted_update) if spec.planted_update.size else 0.0
    directions = []
    if norm_planted > 0.0:
        u, s, vt = np.linalg.svd(spec.planted_update, full_matrices=False)
        row_rank = int(np.sum(s > s[0] * 1e-12))
        row_basis = vt[:row_rank]  # (row_rank, n)
        for _ in range(spec.num_components):
            mix = rng.standard_normal((m, row_rank))
            d = mix @ row_basis
            directions.append(d / frobenius_norm(d))
    else:
        for _ in range(spec.num_components):
            d = rng.standard_normal((m, n))
            directions.append(d / frobenius_norm(d))
    return directions


def mixture_weights(
    num_clients: int, num_components: int, dirichlet_alpha: float | None, rng: RngStream
) -> np.ndarray:
    """Per-client component weights, (K x C).

    ``dirichlet_alpha=None`` gives the exact-uniform (IID) limit; otherwise
    each client draws Dir(alpha * ones(C)).
    """
    if dirichlet_alpha is None:
        return np.full((num_clients, num_components), 1.0 / num_components)
    if not dirichlet_alpha > 0:
        raise ValueError(f"dirichlet_alpha must be positive, got {dirichlet_alpha}")
    alpha_vec = np.full(num_components, float(dirichlet_alpha))
    return np.stack([rng.dirichlet(alpha_vec) for _ in range(num_clients)])


def generate_federated_task(
    spec: TaskSpec,
    num_clients: int,
    samples_per_client: int,
    dirichlet_alpha: float | None,
    rng: RngStream,
) -> list[ClientDataset]:
    """Generate per-client datasets for the planted regression task.

    Deterministic given the stream. Each client draws a component mixture
    from Dir(alpha); every sample picks a component, then
    y = (w0 + planted + shift * direction_c) x + noise.
    """
    if num_clients < 1 or samples_per_client < 1:
        raise ValueError("need at least one client and one sample per client")
    directions = _component_directions(spec, rng.split("directions"))
    weights = mixture_weights(
        num_clients, spec.num_components, dirichlet_alpha, rng.split("mixture")
    )
    maps = [
        spec.w0 + spec.planted_update + spec.shift_magnitude * d for d in directions
    ]
    datasets = []
    for k in range(num_clients):
        client_rng = rng.split("client", k)
        comps = client_rng.choice(spec.num_components, size=samples_per_client, p=weights[k])
        if spec.input_basis is not None:
            z = client_rng.standard_normal((samples_per_client, spec.input_basis.shape[1]))
            x = z @ spec.input_basis.T
        else:
            x = client_rng.standard_normal((samples_per_client, spec.in_dim))
        y = np.empty((samples_per_client, spec.out_dim))
        for c in range(spec.num_components):
            sel = comps == c
            if np.any(sel):
                y[sel] = x[sel] @ maps[c].T
        if spec.noise_level > 0:
            y += spec.noise_level * client_rng.standard_normal(y.shape)
        datasets.append(
            ClientDataset(
                client_id=k,
                inputs=x,
                targets=y,
                components=comps,
                mixture_weights=weights[k],
            )
        )
    return datasets


def export_datasets_csv(datasets: list[ClientDataset], path: str | Path) -> Path:
    """Write all clients' samples to one CSV: client_id, x..., y...."""
    path = Path(path)
    if not datasets:
        raise DegenerateInputError("no datasets to export")
    n = datasets[0].inputs.shape[1]
    m = datasets[0].targets.shape[1]
    header = ["client_id"] + [f"x{i}" for i in range(n)] + [f"y{i}" for i in range(m)]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for ds in datasets:
            for row_x, row_y in zip(ds.inputs, ds.targets):
                writer.writerow(
                    [ds.client_id] + [repr(float(v)) for v in row_x] + [repr(float(v)) for v in row_y]
                )
    return path


def import_datasets_csv(path: str | Path) -> list[ClientDataset]:
    """Read datasets written by export_datasets_csv, grouped by client id.

    Component labels and mixture weights are not part of the file format and
    come back as None.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n = sum(1 for h in header if h.startswith("x"))
        m = sum(1 for h in header if h.startswith("y"))
        rows_by_client: dict[int, list[list[float]]] = {}
        for row in reader:
            cid = int(row[0])
            rows_by_client.setdefault(cid, []).append([float(v) for v in row[1:]])
    datasets = []
    for cid in sorted(rows_by_client):
        data = np.asarray(rows_by_client[cid])
        datasets.append(
            ClientDataset(client_id=cid, inputs=data[:, :n], targets=data[:, n : n + m])
        )
    return datasets
