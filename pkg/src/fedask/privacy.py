"""Differentially private local updates and the RDP privacy accountant.

The private local step trains only the output-side factor b: the weight
gradient is clipped to Frobenius norm C, perturbed with N(0, sigma^2 C^2)
per entry, projected by a^T and scaled by (lr * alpha / rank). The
input-side factor a is never touched during a private phase.

The accountant chains closed-form results: subsampled-Gaussian RDP per step,
additive RDP composition over local steps, an aggregation credit dividing by
the cohort size, conversion to (epsilon, delta)-DP at an optimized order,
amplification by client subsampling, and advanced composition over rounds.
Only scalar mechanism parameters enter the accountant: the spend can never
depend on the values flowing through the protocol.

Noise-power helpers quantify why perturbing both factors is harmful: the
update noise then carries a quadratic interaction term that grows like
sigma^4 d_l^2, on top of the linear sigma^2 d_l term, while the b-only
scheme stays purely linear in sigma^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .adapter import AdapterPair, ClientDataset, lora_gradients, loss_and_grad_w
from .linalg import RngStream, ShapeError, as_matrix


class ClippingViolationError(AssertionError):
    """Internal invariant failure: a post-clip gradient exceeded the bound."""


@dataclass(frozen=True)
class DPConfig:
    """Per-client differential privacy settings.

    clip                 Frobenius-norm bound C on the applied gradient
    noise_multiplier     sigma; per-entry noise std is sigma * C
    data_sampling_ratio  per-step Poisson inclusion probability q_D
    local_steps          m steps per local phase
    learning_rate        gamma
    batch_size           B_size, the analysis batch size for noise-power formulas
    """

    clip: float
    noise_multiplier: float
    data_sampling_ratio: float
    local_steps: int
    learning_rate: float
    batch_size: int = 1

    def __post_init__(self):
        if not self.clip > 0:
            raise ValueError(f"clip must be positive, got {self.clip}")
        if self.noise_multiplier < 0:
            raise ValueError(f"noise_multiplier must be >= 0, got {self.noise_multiplier}")
        if not 0 < self.data_sampling_ratio <= 1:
            raise ValueError(
                f"data_sampling_ratio must be in (0, 1], got {self.data_sampling_ratio}"
            )
        if self.local_steps < 1:
            raise ValueError(f"local_steps must be >= 1, got {self.local_steps}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class PrivacySpend:
    """Composed (epsilon, delta) guarantee together with accounting context."""

    epsilon: float
    delta: float
    rdp_order: float
    rounds_composed: int

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must be in (0, 1), got {self.delta}")
        if not self.rdp_order > 1:
            raise ValueError(f"rdp_order must exceed 1, got {self.rdp_order}")


@dataclass(frozen=True)
class NoisePowerBreakdown:
    """Closed-form noise power split into its linear and quadratic parts.

    total_predicted excludes the cross term by definition; use
    predicted_cross_term for it.
    """

    linear_term: float
    quadratic_term: float
    total_predicted: float
    total_empirical: float | None = None

    def __post_init__(self):
        if self.linear_term < 0 or self.quadratic_term < 0:
            raise ValueError("noise power terms must be non-negative")
        expected = self.linear_term + self.quadratic_term
        if not math.isclose(self.total_predicted, expected, rel_tol=1e-12, abs_tol=1e-300):
            raise ValueError("total_predicted must equal linear_term + quadratic_term")


def clip_frobenius(grad: np.ndarray, clip: float) -> np.ndarray:
    """Scale grad to Frobenius norm at most clip: grad / max(1, ||grad||/clip)."""
    grad = as_matrix(grad, "grad")
    norm = float(np.linalg.norm(grad))
    clipped = grad / max(1.0, norm / clip)
    post = float(np.linalg.norm(clipped))
    if post > clip * (1.0 + 1e-9):
        raise ClippingViolationError(f"clipped norm {post} exceeds bound {clip}")
    return clipped


def dp_local_step(
    pair: AdapterPair,
    w0: np.ndarray,
    batch: ClientDataset | None,
    cfg: DPConfig,
    rng: RngStream,
) -> AdapterPair:
    """One private step on b; a is left untouched.

    The weight gradient (zero for an empty Poisson batch) is clipped, gets
    independent N(0, sigma^2 C^2) noise on every entry, and is then projected
    through a^T:

        b <- b - (lr * alpha / rank) * (clip(grad_w) + noise) @ a.T
    """
    w0 = as_matrix(w0, "w0")
    if batch is not None and len(batch) > 0:
        _, grad_w = loss_and_grad_w(w0, pair, batch)
        applied = clip_frobenius(grad_w, cfg.clip)
    else:
        applied = np.zeros((pair.out_dim, pair.in_dim))
    if cfg.noise_multiplier > 0:
        noise = cfg.noise_multiplier * cfg.clip * rng.standard_normal(applied.shape)
        applied = applied + noise
    step = cfg.learning_rate * pair.scaling
    new_b = pair.b - step * (applied @ pair.a.T)
    return pair.with_factors(b=new_b)


def dp_local_phase(
    pair: AdapterPair,
    w0: np.ndarray,
    dataset: ClientDataset,
    cfg: DPConfig,
    rng: RngStream,
) -> AdapterPair:
    """m private steps with per-step Poisson subsampling at ratio q_D."""
    for step in range(cfg.local_steps):
        mask = rng.bernoulli_mask(cfg.data_sampling_ratio, len(dataset))
        batch = dataset.subset(np.flatnonzero(mask)) if mask.any() else None
        pair = dp_local_step(pair, w0, batch, cfg, rng)
    return pair


def nondp_local_step(
    pair: AdapterPair,
    w0: np.ndarray,
    batch: ClientDataset,
    learning_rate: float,
) -> AdapterPair:
    """Plain simultaneous SGD step on both factors."""
    if learning_rate == 0.0:
        return pair
    _, grad_w = loss_and_grad_w(w0, pair, batch)
    grad_a, grad_b = lora_gradients(pair, grad_w)
    return pair.with_factors(
        a=pair.a - learning_rate * grad_a,
        b=pair.b - learning_rate * grad_b,
    )


def _draw_batch(dataset: ClientDataset, batch_size: int, rng: RngStream) -> ClientDataset:
    n = len(dataset)
    if batch_size >= n:
        return dataset
    idx = rng.choice(n, size=batch_size, p=None)
    return dataset.subset(idx)


def nondp_local_phase(
    pair: AdapterPair,
    w0: np.ndarray,
    dataset: ClientDataset,
    steps: int,
    learning_rate: float,
    batch_size: int,
    rng: RngStream,
) -> AdapterPair:
    """m plain SGD steps on random mini-batches."""
    for _ in range(steps):
        batch = _draw_batch(dataset, batch_size, rng)
        pair = nondp_local_step(pair, w0, batch, learning_rate)
    return pair


def bonly_local_phase(
    pair: AdapterPair,
    w0: np.ndarray,
    dataset: ClientDataset,
    steps: int,
    learning_rate: float,
    batch_size: int,
    rng: RngStream,
) -> AdapterPair:
    """Noiseless b-only phase: the fixed-a baseline without privacy."""
    for _ in range(steps):
        batch = _draw_batch(dataset, batch_size, rng)
        _, grad_w = loss_and_grad_w(w0, pair, batch)
        _, grad_b = lora_gradients(pair, grad_w)
        pair = pair.with_factors(b=pair.b - learning_rate * grad_b)
    return pair


def dp_local_phase_both(
    pair: AdapterPair,
    w0: np.ndarray,
    dataset: ClientDataset,
    cfg: DPConfig,
    rng: RngStream,
) -> AdapterPair:
    """Private phase that perturbs both factor gradients.

    This is the noise-amplifying scheme the b-only update avoids: each factor
    gradient receives independent per-entry N(0, sigma^2 C^2) noise, so the
    resulting update noise carries the quadratic interaction term.
    """
    sigma_c = cfg.noise_multiplier * cfg.clip
    for step in range(cfg.local_steps):
        mask = rng.bernoulli_mask(cfg.data_sampling_ratio, len(dataset))
        if mask.any():
            batch = dataset.subset(np.flatnonzero(mask))
            _, grad_w = loss_and_grad_w(w0, pair, batch)
            applied = clip_frobenius(grad_w, cfg.clip)
        else:
            applied = np.zeros((pair.out_dim, pair.in_dim))
        grad_a, grad_b = lora_gradients(pair, applied)
        if sigma_c > 0:
            grad_a = grad_a + sigma_c * rng.standard_normal(grad_a.shape)
            grad_b = grad_b + sigma_c * rng.standard_normal(grad_b.shape)
        pair = pair.with_factors(
            a=pair.a - cfg.learning_rate * grad_a,
            b=pair.b - cfg.learning_rate * grad_b,
        )
    return pair


# ---------------------------------------------------------------------------
# Noise power: closed forms and their Monte-Carlo twin
# ---------------------------------------------------------------------------


def _check_noise_dims(a: np.ndarray, b: np.ndarray, d_l: int, r: int) -> None:
    if a.shape != (r, d_l) or b.shape != (d_l, r):
        raise ShapeError(
            f"expected a ({r}x{d_l}) and b ({d_l}x{r}), got {a.shape} and {b.shape}"
        )


def predicted_noise_power(
    a,
    b,
    eta: float,
    sigma: float,
    clip: float,
    batch_size: int,
    d_l: int,
    r: int,
) -> NoisePowerBreakdown:
    """Expected update-noise power when both factor gradients are perturbed.

    With effective per-entry noise variance s2 = (sigma * clip / batch)^2:

        linear    = eta^2 * s2 * d_l * (||a||_F^2 + ||b||_F^2)
        quadratic = eta^4 * s2^2 * d_l^2 * r

    The quadratic part is the noise-noise interaction; it dominates for
    large sigma or eta and is what the b-only update eliminates.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    _check_noise_dims(a, b, d_l, r)
    if sigma < 0 or clip <= 0 or eta <= 0 or batch_size < 1:
        raise ValueError("require eta > 0, clip > 0, sigma >= 0, batch_size >= 1")
    s2 = (sigma * clip / batch_size) ** 2
    norms = float(np.sum(a * a) + np.sum(b * b))
    linear = eta**2 * s2 * d_l * norms
    quadratic = eta**4 * s2**2 * d_l**2 * r
    return NoisePowerBreakdown(
        linear_term=linear,
        quadratic_term=quadratic,
        total_predicted=linear + quadratic,
    )


def predicted_cross_term(a, b, grad_a, grad_b, eta: float, sigma: float, clip: float, batch_size: int) -> float:
    """Expected cross term between the linear and quadratic noise parts.

    Equals -2 eta^3 s2 d_l (tr(b^T grad_b) + tr(a^T grad_a)); zero whenever
    the signal gradients vanish. Excluded from total_predicted.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    grad_a = as_matrix(grad_a, "grad_a")
    grad_b = as_matrix(grad_b, "grad_b")
    d_l = b.shape[0]
    s2 = (sigma * clip / batch_size) ** 2
    return -2.0 * eta**3 * s2 * d_l * float(np.sum(b * grad_b) + np.sum(a * grad_a))


def empirical_noise_power(
    a,
    b,
    eta: float,
    sigma: float,
    clip: float,
    batch_size: int,
    trials: int,
    rng: RngStream,
    grad_a=None,
    grad_b=None,
    chunk: int = 20000,
) -> float:
    """Monte-Carlo mean of the exact update-noise power.

    Samples xi_a (r x d_l), xi_b (d_l x r) with per-entry std
    sigma * clip / batch and averages

        || -eta (b xi_a + xi_b a) + eta^2 (gb xi_a + xi_b ga + xi_b xi_a) ||_F^2

    over trials; gradients default to zero (pure-noise decomposition).
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    if sigma == 0.0:
        return 0.0
    r, d_l = a.shape
    ga = np.zeros((r, d_l)) if grad_a is None else as_matrix(grad_a, "grad_a")
    gb = np.zeros((d_l, r)) if grad_b is None else as_matrix(grad_b, "grad_b")
    s = sigma * clip / batch_size
    total = 0.0
    done = 0
    while done < trials:
        size = min(chunk, trials - done)
        xi_a = s * rng.standard_normal((size, r, d_l))
        xi_b = s * rng.standard_normal((size, d_l, r))
        noise = -eta * (b @ xi_a + xi_b @ a) + eta**2 * (
            gb @ xi_a + xi_b @ ga + xi_b @ xi_a
        )
        total += float(np.sum(noise * noise))
        done += size
    return total / trials


def predicted_projected_noise_power(a, eta: float, sigma: float, clip: float, batch_size: int = 1) -> float:
    """Expected update-noise power of the b-only scheme after one step.

    The b-update noise is -eta * Xi @ a.T with Xi i.i.d. N(0, s2) per entry,
    so the weight-space noise is -eta * Xi @ (a.T a) and its expected power
    is eta^2 * s2 * d_l * ||a.T a||_F^2. Purely linear in sigma^2: there is
    no quadratic interaction because only one factor is perturbed.
    """
    a = as_matrix(a, "a")
    d_l = a.shape[1]
    s2 = (sigma * clip / batch_size) ** 2
    gram = a.T @ a
    return eta**2 * s2 * d_l * float(np.sum(gram * gram))


def empirical_projected_noise_power(
    a, eta: float, sigma: float, clip: float, trials: int, rng: RngStream,
    batch_size: int = 1, chunk: int = 20000,
) -> float:
    """Monte-Carlo twin of predicted_projected_noise_power."""
    a = as_matrix(a, "a")
    if sigma == 0.0:
        return 0.0
    d_l = a.shape[1]
    s = sigma * clip / batch_size
    gram = a.T @ a
    total = 0.0
    done = 0
    while done < trials:
        size = min(chunk, trials - done)
        xi = s * rng.standard_normal((size, d_l, d_l))
        noise = -eta * (xi @ gram)
        total += float(np.sum(noise * noise))
        done += size
    return total / trials


# ---------------------------------------------------------------------------
# RDP accountant
# ---------------------------------------------------------------------------


def rdp_subsampled_gaussian(q_d: float, sigma: float, alpha: float, constant: float = 1.0) -> float:
    """Per-step RDP of the q_D-subsampled Gaussian mechanism.

    Returns constant * q_d^2 * (alpha + 1) / sigma^2; the leading constant of
    the asymptotic bound is explicit configuration. sigma = 0 yields +inf.
    """
    if not 0 < q_d <= 1:
        raise ValueError(f"q_d must be in (0, 1], got {q_d}")
    if not alpha > 1:
        raise ValueError(f"alpha must exceed 1, got {alpha}")
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0.0:
        return math.inf
    return constant * q_d**2 * (alpha + 1.0) / sigma**2


def compose_rdp(per_step: float, steps: int) -> float:
    """Additive RDP composition over adaptive steps."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    return steps * per_step


def rdp_to_dp(rdp: float, alpha: float, delta: float) -> float:
    """Convert an (alpha, R)-RDP guarantee to (epsilon, delta)-DP.

    epsilon = R + ln((alpha-1)/alpha) - (ln delta + ln alpha)/(alpha - 1),
    clamped at zero: a negative value signals an over-generous (alpha, delta)
    regime, not negative privacy loss.
    """
    if not alpha > 1:
        raise ValueError(f"alpha must exceed 1, got {alpha}")
    if not 0 < delta < 1:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    if math.isinf(rdp):
        return math.inf
    eps = rdp + math.log((alpha - 1.0) / alpha) - (math.log(delta) + math.log(alpha)) / (alpha - 1.0)
    return max(0.0, eps)


def advanced_composition(
    epsilon: float, delta: float, k: int, delta_prime: float
) -> tuple[float, float]:
    """Advanced composition of k adaptive (epsilon, delta)-DP mechanisms.

    epsilon_total = sqrt(2 k ln(1/delta')) * epsilon + k * epsilon * (e^epsilon - 1)
    delta_total   = k * delta + delta'
    """
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not 0 < delta_prime < 1:
        raise ValueError(f"delta_prime must be in (0, 1), got {delta_prime}")
    if math.isinf(epsilon):
        return math.inf, k * delta + delta_prime
    eps_total = math.sqrt(2.0 * k * math.log(1.0 / delta_prime)) * epsilon
    eps_total += k * epsilon * math.expm1(epsilon)
    return eps_total, k * delta + delta_prime


def subsample_amplify(epsilon: float, delta: float, gamma: float) -> tuple[float, float]:
    """Privacy amplification by subsampling at ratio gamma.

    epsilon' = ln(1 + gamma * (e^epsilon - 1)),  delta' = gamma * delta.
    """
    if not 0 <= gamma <= 1:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    if math.isinf(epsilon):
        return (math.inf if gamma > 0 else 0.0), gamma * delta
    return math.log1p(gamma * math.expm1(epsilon)), gamma * delta


class RdpOrder(NamedTuple):
    """Optimized RDP order; ``degenerate`` marks a formula value <= 1."""

    alpha: float
    degenerate: bool


RDP_ORDER_FLOOR = 1.0 + 1e-6


def optimal_rdp_order(
    q_k: float, rounds: int, delta: float, cohort_size: int, sigma: float,
    local_steps: int, q_d: float,
) -> RdpOrder:
    """Approximately optimal RDP order for the accountant chain.

    alpha_opt = sqrt(ln(2 q_K T / delta) * K_s * sigma^2 / (m * q_D^2)),
    floored at just above 1 when the formula degenerates.
    """
    if min(q_k, rounds, delta, cohort_size, sigma, local_steps, q_d) <= 0:
        raise ValueError("all accountant parameters must be positive")
    if not delta < 1:
        raise ValueError(f"delta must be < 1, got {delta}")
    inner = math.log(2.0 * q_k * rounds / delta) * cohort_size * sigma**2 / (local_steps * q_d**2)
    if inner <= 0:
        return RdpOrder(RDP_ORDER_FLOOR, True)
    alpha = math.sqrt(inner)
    if alpha <= 1.0:
        return RdpOrder(RDP_ORDER_FLOOR, True)
    return RdpOrder(alpha, False)


def calibrate_sigma(
    epsilon: float, delta: float, q_d: float, local_steps: int, q_k: float,
    rounds: int, num_clients: int, constant: float = 1.0,
) -> float:
    """Noise variance sigma^2 meeting a target (epsilon, delta) budget.

    sigma^2 = c * q_D^2 * m * q_K * T * ln(2/delta) * ln(2 T q_K / delta)
              / (epsilon^2 * K)

    with the asymptotic constant c as explicit configuration.
    """
    if min(epsilon, delta, q_d, local_steps, q_k, rounds, num_clients) <= 0:
        raise ValueError("all calibration parameters must be positive")
    if not delta < 1:
        raise ValueError(f"delta must be < 1, got {delta}")
    return (
        constant
        * q_d**2
        * local_steps
        * q_k
        * rounds
        * math.log(2.0 / delta)
        * math.log(2.0 * rounds * q_k / delta)
        / (epsilon**2 * num_clients)
    )


@dataclass(frozen=True)
class AccountantReport:
    """Full accountant output for one configuration.

    The aggregation step credits the per-client RDP by dividing by the
    cohort size; ``cohort_rdp_division`` records that this credit was
    applied (it treats the cohort's sketches as parallel contributions even
    though they share the broadcast basis).
    """

    spend: PrivacySpend
    sigma: float
    per_round_epsilon: float
    delta_per_round: float
    cohort_rdp_division: int
    degenerate_order: bool

    def to_json_dict(self) -> dict:
        return {
            "epsilon": self.spend.epsilon,
            "delta": self.spend.delta,
            "alpha_opt": self.spend.rdp_order,
            "sigma": self.sigma,
            "per_round_epsilon": self.per_round_epsilon,
            "delta_per_round": self.delta_per_round,
            "rounds": self.spend.rounds_composed,
            "cohort_rdp_division": self.cohort_rdp_division,
            "degenerate_order": self.degenerate_order,
        }


def end_to_end_spend(
    cfg: DPConfig,
    q_k: float,
    rounds: int,
    cohort_size: int,
    delta: float,
    rdp_constant: float = 1.0,
) -> AccountantReport:
    """Compose the full privacy spend of a training run.

    Chain: per-step subsampled-Gaussian RDP -> additive composition over m
    local steps -> division by the cohort size -> conversion to DP at the
    optimized order with delta_0 = delta/2 -> client-subsampling
    amplification at q_K -> advanced composition over T rounds with
    delta_1 = delta / (2 q_K T). A single round skips the final composition,
    which would otherwise inflate a lone mechanism.
    """
    if rounds < 1:
        raise ValueError(f"rounds must be >= 1, got {rounds}")
    if cohort_size < 1:
        raise ValueError(f"cohort_size must be >= 1, got {cohort_size}")
    if not 0 < q_k <= 1:
        raise ValueError(f"q_k must be in (0, 1], got {q_k}")
    if not 0 < delta < 1:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    if cfg.noise_multiplier == 0.0:
        raise ValueError("noise_multiplier must be positive to account a spend")

    order = optimal_rdp_order(
        q_k, rounds, delta, cohort_size, cfg.noise_multiplier, cfg.local_steps,
        cfg.data_sampling_ratio,
    )
    per_step = rdp_subsampled_gaussian(
        cfg.data_sampling_ratio, cfg.noise_multiplier, order.alpha, rdp_constant
    )
    per_phase = compose_rdp(per_step, cfg.local_steps)
    aggregated = per_phase / cohort_size
    delta_0 = delta / 2.0
    eps_0 = rdp_to_dp(aggregated, order.alpha, delta_0)
    eps_round, delta_round = subsample_amplify(eps_0, delta_0, q_k)
    if rounds == 1:
        eps_total, delta_total = eps_round, delta_round
    else:
        delta_1 = delta / (2.0 * q_k * rounds)
        eps_total, delta_total = advanced_composition(eps_round, delta_round, rounds, delta_1)
    spend = PrivacySpend(
        epsilon=eps_total,
        delta=delta_total,
        rdp_order=order.alpha,
        rounds_composed=rounds,
    )
    return AccountantReport(
        spend=spend,
        sigma=cfg.noise_multiplier,
        per_round_epsilon=eps_round,
        delta_per_round=delta_round,
        cohort_rdp_division=cohort_size,
        degenerate_order=order.degenerate,
    )
