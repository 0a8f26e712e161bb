"""Client/server round protocols: double-sketch aggregation and baselines.

The double-sketch round never ships factor products. Each selected client
uploads b @ (a @ omega) against a shared Gaussian test matrix, the server
orthonormalizes the summed sketches into a basis q, clients answer with
a.T @ (b.T @ q), and the server reconstructs the aggregate update from the
SVD of the summed response: the global pair becomes the balanced
factorization of the leading rank-r part. When the sketch width covers the
stacked column space of all client b factors (plus two), the reconstruction
is exact, not approximate.

Baselines: factor-wise averaging (which misaligns with the mean of products
under heterogeneity) and the fixed-a variant that trains and averages only
b. Aggregation always sums in ascending client-id order, so results do not
depend on message arrival order or worker scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .adapter import AdapterPair, ClientDataset, delta_w
from .linalg import RngStream, ShapeError, as_matrix, qr, svd
from .privacy import (
    DPConfig,
    bonly_local_phase,
    dp_local_phase,
    dp_local_phase_both,
    nondp_local_phase,
)


class DegenerateBasisError(RuntimeError):
    """The aggregated sketch was all-zero; no basis can be formed."""


class ProtocolViolationError(RuntimeError):
    """A client broke the round contract (e.g. mutated factors between phases)."""


SEED_BYTES = 8.0  # a broadcast test-matrix seed costs one 64-bit word


@dataclass(frozen=True)
class SketchMessage:
    """One client's uplink payload for a sketch phase."""

    client_id: int
    phase: int
    payload: np.ndarray
    payload_bytes: float

    def __post_init__(self):
        object.__setattr__(self, "payload", as_matrix(self.payload, "payload"))
        if self.phase not in (1, 2):
            raise ValueError(f"phase must be 1 or 2, got {self.phase}")
        if self.payload_bytes < 0:
            raise ValueError("payload_bytes must be >= 0")


@dataclass(frozen=True)
class ServerState:
    """Global adapter pair plus everything needed to regenerate the sketches.

    The test matrix omega is never stored: it is regenerated from
    ``omega_seed`` (and the round index when ``resample_omega`` is set), so
    broadcasting it costs one seed.
    """

    pair: AdapterPair
    over_sketch: int
    omega_seed: int
    round_index: int = 0
    resample_omega: bool = False
    client_ids: tuple[int, ...] = ()
    initial_a: np.ndarray | None = None

    def __post_init__(self):
        if self.over_sketch < 0:
            raise ValueError(f"over_sketch must be >= 0, got {self.over_sketch}")
        if self.initial_a is None:
            object.__setattr__(self, "initial_a", self.pair.a.copy())

    @property
    def sketch_width(self) -> int:
        return self.pair.rank + self.over_sketch

    def omega(self) -> np.ndarray:
        """Regenerate the shared Gaussian test matrix for this round."""
        label = self.round_index if self.resample_omega else 0
        stream = RngStream(self.omega_seed, path=()).split("omega", label)
        return stream.standard_normal((self.pair.in_dim, self.sketch_width))


@dataclass
class ClientState:
    """One simulated client: identity, current factors, data, privacy settings."""

    client_id: int
    pair: AdapterPair
    dataset: ClientDataset
    dp: DPConfig | None = None
    _phase1_fingerprint: bytes | None = field(default=None, repr=False)


def sample_clients(client_ids: tuple[int, ...], q_k: float, rng: RngStream) -> tuple[int, ...]:
    """Independent Bernoulli(q_K) cohort; an empty draw is re-drawn."""
    if not 0 < q_k <= 1:
        raise ValueError(f"q_k must be in (0, 1], got {q_k}")
    if not client_ids:
        raise ValueError("no clients registered")
    for _ in range(100_000):
        mask = rng.bernoulli_mask(q_k, len(client_ids))
        if mask.any():
            return tuple(cid for cid, keep in zip(client_ids, mask) if keep)
    raise RuntimeError("could not draw a non-empty cohort")


def sketch_phase1(client: ClientState, omega: np.ndarray, bytes_per_element: float = 2.0) -> SketchMessage:
    """First uplink: b @ (a @ omega), computed inner-product first.

    The (n x width) intermediate keeps the client from ever forming the full
    b @ a product. Also freezes the client's factors for phase 2.
    """
    omega = as_matrix(omega, "omega")
    pair = client.pair
    if omega.shape[0] != pair.in_dim:
        raise ShapeError(
            f"omega rows {omega.shape[0]} must equal adapter input dim {pair.in_dim}"
        )
    payload = pair.b @ (pair.a @ omega)
    client._phase1_fingerprint = pair.fingerprint()
    return SketchMessage(
        client_id=client.client_id,
        phase=1,
        payload=payload,
        payload_bytes=payload.size * bytes_per_element,
    )


def sketch_phase2(client: ClientState, basis: np.ndarray, bytes_per_element: float = 2.0) -> SketchMessage:
    """Second uplink: a.T @ (b.T @ basis), n x width.

    Both sketches must describe the same b @ a product; any factor mutation
    since phase 1 is detected and rejected.
    """
    basis = as_matrix(basis, "basis")
    pair = client.pair
    if client._phase1_fingerprint is None:
        raise ProtocolViolationError(
            f"client {client.client_id} answered phase 2 without a phase 1 sketch"
        )
    if client._phase1_fingerprint != pair.fingerprint():
        raise ProtocolViolationError(
            f"client {client.client_id} mutated its factors between sketch phases"
        )
    if basis.shape[0] != pair.out_dim:
        raise ShapeError(
            f"basis rows {basis.shape[0]} must equal adapter output dim {pair.out_dim}"
        )
    payload = pair.a.T @ (pair.b.T @ basis)
    return SketchMessage(
        client_id=client.client_id,
        phase=2,
        payload=payload,
        payload_bytes=payload.size * bytes_per_element,
    )


def _aggregate(messages: list[SketchMessage]) -> np.ndarray:
    """Sum payloads in ascending client-id order (the determinism contract)."""
    if not messages:
        raise ValueError("no messages to aggregate")
    ordered = sorted(messages, key=lambda msg: msg.client_id)
    shapes = {msg.payload.shape for msg in ordered}
    if len(shapes) > 1:
        raise ShapeError(f"inconsistent payload shapes: {sorted(shapes)}")
    total = np.zeros_like(ordered[0].payload)
    for msg in ordered:
        total = total + msg.payload
    return total


def server_basis(messages: list[SketchMessage]) -> np.ndarray:
    """Orthonormal basis of the summed phase-1 sketches."""
    aggregate = _aggregate(messages)
    if not np.any(aggregate):
        raise DegenerateBasisError("phase-1 aggregate is all zero")
    q, _ = qr(aggregate)
    return q


def server_reconstruct(
    messages: list[SketchMessage],
    basis: np.ndarray,
    rank: int,
    cohort_size: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Rebuild the global pair from the summed phase-2 sketches.

    The sum is normalized by the cohort size before the SVD so the
    reconstruction targets the mean of the clients' products. Returns
    (a_new, b_new, pre_truncation, spectrum): the rank-r balanced pair
    b = q @ u_r @ diag(s_r)^(1/2), a = diag(s_r)^(1/2) @ vt_r, the full
    (untruncated) reconstruction for fidelity metrics, and the spectrum.
    """
    basis = as_matrix(basis, "basis")
    aggregate = _aggregate(messages) / cohort_size  # (n x width)
    result = svd(aggregate.T)
    u, s, vt = result.u, result.singular_values, result.vt
    pre_truncation = basis @ (u * s) @ vt
    sqrt_s = np.sqrt(s[:rank])
    b_new = basis @ u[:, :rank] * sqrt_s[np.newaxis, :]
    a_new = sqrt_s[:, np.newaxis] * vt[:rank]
    return a_new, b_new, pre_truncation, s


@dataclass(frozen=True)
class RoundOutcome:
    """Raw protocol results for one round, before metric assembly.

    Deltas are reported in update space, i.e. scaled by alpha / rank.
    ``pre_truncation_delta`` is None for baselines that do not sketch.
    """

    global_delta: np.ndarray
    local_deltas: list[np.ndarray]
    pre_truncation_delta: np.ndarray | None
    spectrum: np.ndarray | None
    uplink_bytes_per_client: float
    downlink_bytes_per_client: float


def _run_local_phases(
    clients: list[ClientState],
    server: ServerState,
    w0: np.ndarray,
    rng: RngStream,
    use_dp: bool,
    local_steps: int,
    learning_rate: float,
    batch_size: int,
    mode: str,
    workers: int = 1,
) -> None:
    """Broadcast the global pair and run every client's local phase.

    Each client draws from its own (round, client) sub-stream, so results
    are identical for any worker count.
    """

    def train(client: ClientState) -> AdapterPair:
        local_rng = rng.split(server.round_index, client.client_id, "local")
        if mode == "ffa":
            assert server.initial_a is not None
            pair = client.pair.with_factors(a=server.initial_a.copy(), b=server.pair.b.copy())
            if use_dp:
                if client.dp is None:
                    raise ValueError(f"client {client.client_id} has no DP settings")
                return dp_local_phase(pair, w0, client.dataset, client.dp, local_rng)
            return bonly_local_phase(
                pair, w0, client.dataset, local_steps, learning_rate, batch_size, local_rng
            )
        pair = client.pair.with_factors(a=server.pair.a.copy(), b=server.pair.b.copy())
        if use_dp:
            if client.dp is None:
                raise ValueError(f"client {client.client_id} has no DP settings")
            if mode == "both_noised":
                return dp_local_phase_both(pair, w0, client.dataset, client.dp, local_rng)
            return dp_local_phase(pair, w0, client.dataset, client.dp, local_rng)
        return nondp_local_phase(
            pair, w0, client.dataset, local_steps, learning_rate, batch_size, local_rng
        )

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            trained = list(pool.map(train, clients))
    else:
        trained = [train(client) for client in clients]
    for client, pair in zip(clients, trained):
        client.pair = pair
        client._phase1_fingerprint = None


def run_round_fedask(
    server: ServerState,
    clients: list[ClientState],
    w0: np.ndarray,
    rng: RngStream,
    use_dp: bool = False,
    local_steps: int = 1,
    learning_rate: float = 0.01,
    batch_size: int = 8,
    bytes_per_element: float = 2.0,
    workers: int = 1,
    dp_mode: str = "b_only",
) -> tuple[ServerState, RoundOutcome]:
    """One double-sketch round over an already-sampled cohort.

    ``dp_mode`` selects which factor gradients receive noise under DP:
    "b_only" (the default protocol) or "both" (the amplifying comparator
    used by the noise study).
    """
    if not clients:
        raise ValueError("cohort is empty")
    if dp_mode not in ("b_only", "both"):
        raise ValueError(f"dp_mode must be 'b_only' or 'both', got {dp_mode!r}")
    _run_local_phases(
        clients, server, w0, rng, use_dp, local_steps, learning_rate, batch_size,
        mode="both_noised" if (use_dp and dp_mode == "both") else "fedask",
        workers=workers,
    )
    omega = server.omega()
    phase1 = [sketch_phase1(c, omega, bytes_per_element) for c in clients]
    basis = server_basis(phase1)
    phase2 = [sketch_phase2(c, basis, bytes_per_element) for c in clients]
    a_new, b_new, pre_truncation, spectrum = server_reconstruct(
        phase2, basis, server.pair.rank, len(clients)
    )
    new_pair = server.pair.with_factors(a=a_new, b=b_new)
    new_server = replace(server, pair=new_pair, round_index=server.round_index + 1)
    scaling = server.pair.scaling
    uplink = (phase1[0].payload_bytes + phase2[0].payload_bytes)
    downlink = (
        (server.pair.a.size + server.pair.b.size) * bytes_per_element  # global pair
        + basis.size * bytes_per_element  # broadcast basis
        + SEED_BYTES  # omega travels as a seed
    )
    outcome = RoundOutcome(
        global_delta=delta_w(new_pair),
        local_deltas=[delta_w(c.pair) for c in clients],
        pre_truncation_delta=scaling * pre_truncation,
        spectrum=scaling * spectrum,
        uplink_bytes_per_client=uplink,
        downlink_bytes_per_client=downlink,
    )
    return new_server, outcome


def run_round_fedavg(
    server: ServerState,
    clients: list[ClientState],
    w0: np.ndarray,
    rng: RngStream,
    use_dp: bool = False,
    local_steps: int = 1,
    learning_rate: float = 0.01,
    batch_size: int = 8,
    bytes_per_element: float = 2.0,
    workers: int = 1,
) -> tuple[ServerState, RoundOutcome]:
    """Factor-wise averaging round: a and b are averaged separately.

    With DP enabled, clients perturb both factor gradients; this is the
    noise-amplifying configuration the double-sketch protocol avoids.
    """
    if not clients:
        raise ValueError("cohort is empty")
    _run_local_phases(
        clients, server, w0, rng, use_dp, local_steps, learning_rate, batch_size,
        mode="both_noised" if use_dp else "fedavg", workers=workers,
    )
    ordered = sorted(clients, key=lambda c: c.client_id)
    a_new = sum(c.pair.a for c in ordered) / len(ordered)
    b_new = sum(c.pair.b for c in ordered) / len(ordered)
    new_pair = server.pair.with_factors(a=a_new, b=b_new)
    new_server = replace(server, pair=new_pair, round_index=server.round_index + 1)
    pair_elems = server.pair.a.size + server.pair.b.size
    outcome = RoundOutcome(
        global_delta=delta_w(new_pair),
        local_deltas=[delta_w(c.pair) for c in clients],
        pre_truncation_delta=None,
        spectrum=None,
        uplink_bytes_per_client=pair_elems * bytes_per_element,
        downlink_bytes_per_client=pair_elems * bytes_per_element,
    )
    return new_server, outcome


def run_round_ffa(
    server: ServerState,
    clients: list[ClientState],
    w0: np.ndarray,
    rng: RngStream,
    use_dp: bool = False,
    local_steps: int = 1,
    learning_rate: float = 0.01,
    batch_size: int = 8,
    bytes_per_element: float = 2.0,
    workers: int = 1,
) -> tuple[ServerState, RoundOutcome]:
    """Fixed-a baseline round: a stays at its initial value, b is averaged.

    Averaging is exact here because the product factor is shared, but every
    update is confined to the row space of the initial a.
    """
    if not clients:
        raise ValueError("cohort is empty")
    assert server.initial_a is not None
    _run_local_phases(
        clients, server, w0, rng, use_dp, local_steps, learning_rate, batch_size,
        mode="ffa", workers=workers,
    )
    ordered = sorted(clients, key=lambda c: c.client_id)
    b_new = sum(c.pair.b for c in ordered) / len(ordered)
    new_pair = server.pair.with_factors(a=server.initial_a.copy(), b=b_new)
    new_server = replace(server, pair=new_pair, round_index=server.round_index + 1)
    b_elems = server.pair.b.size
    outcome = RoundOutcome(
        global_delta=delta_w(new_pair),
        local_deltas=[delta_w(c.pair) for c in clients],
        pre_truncation_delta=None,
        spectrum=None,
        uplink_bytes_per_client=b_elems * bytes_per_element,
        downlink_bytes_per_client=b_elems * bytes_per_element,
    )
    return new_server, outcome


def range_finder_error_bound(singular_values, k_approx: int, s_over: int) -> float:
    """Expected Frobenius error bound for Gaussian range finding.

    For a target with the given spectrum, sketching with k_approx + s_over
    Gaussian columns satisfies

        E ||(I - P_Y) A||_F <= sqrt(1 + k_approx / (s_over - 1))
                               * sqrt(sum of squared tail singular values)

    where the tail starts after the k_approx-th value. A zero tail makes the
    bound zero: that is the exact-aggregation regime.
    """
    s = np.asarray(singular_values, dtype=np.float64).ravel()
    if k_approx < 1:
        raise ValueError(f"k_approx must be >= 1, got {k_approx}")
    if s_over < 2:
        raise ValueError(f"s_over must be >= 2, got {s_over}")
    tail = s[k_approx:]
    factor = np.sqrt(1.0 + k_approx / (s_over - 1.0))
    return float(factor * np.sqrt(np.sum(tail * tail)))


def exact_aggregation_oversketch(stacked_b_rank: int, rank: int) -> int:
    """Smallest over-sketch p guaranteeing exact aggregation: d_B - r + 2."""
    return max(0, stacked_b_rank - rank + 2)
