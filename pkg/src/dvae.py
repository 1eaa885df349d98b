# src/dvae.py

"""
Discrete VAEs trained on the negative ELBO

    -E_{z ~ q}[f_theta(x, z)] + KL(q_phi(z|x) || uniform)

with a categorical latent (one-hot decoder input) or n binary latents
(two-hot decoder input, optional pairwise encoder couplings).

Only the reconstruction term goes through a stochastic estimator; the KL
gradient is computed analytically on the tape.
"""

import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from .data_io import Dataset, batch_iterator
from .estimators import (
    EstimatorConfig,
    encoder_log_probs,
    estimate,
    log_likelihood_table,
)
from .gumbel_sampling import gumbel_max_sample, make_rng, one_hot, sample_gumbel
from .structured_map import (
    CapacityError,
    PairwisePotentials,
    all_assignments,
    assignment_scores,
    decoder_lowdim_approx,
    edge_list,
    structured_map,
    structured_perturbed_argmax,
    two_hot,
)
from .tensor_autodiff import (
    Adam,
    ContractError,
    DomainError,
    GradientMap,
    MlpParams,
    Sgd,
    Tape,
    Tensor,
    add,
    backward,
    bce_loss,
    bce_rows,
    check_finite,
    columns,
    exp,
    forward_mlp,
    init_mlp,
    log_softmax,
    matmul,
    mlp_values,
    mul,
    scale,
    sigmoid,
    softplus,
    total,
    weighted_sum,
)

logger = logging.getLogger(__name__)

MAX_KL_BITS = 16


class ConfigurationError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


class LatentSpec(BaseModel):
    kind: Literal["categorical", "structured"] = "categorical"
    k: int = Field(default=10, ge=2)
    n: int = Field(default=8, ge=1)
    pairwise: Literal["none", "supermodular", "general"] = "none"

    @model_validator(mode="after")
    def _couplings_need_two_bits(self):
        if self.kind == "structured" and self.pairwise != "none":
            if self.n < 2:
                raise ValueError("pairwise couplings need n >= 2")
            if self.n > MAX_KL_BITS:
                raise ValueError(f"pairwise KL enumerates 2^n states; n must be <= {MAX_KL_BITS}")
        return self

    @property
    def representation_width(self) -> int:
        return self.k if self.kind == "categorical" else 2 * self.n

    @property
    def num_edges(self) -> int:
        if self.kind != "structured" or self.pairwise == "none":
            return 0
        return self.n * (self.n - 1) // 2

    @property
    def encoder_width(self) -> int:
        if self.kind == "categorical":
            return self.k
        return 2 * self.n + self.num_edges


class SupervisionConfig(BaseModel):
    num_labels: int = Field(default=100, ge=1)
    weight: float = Field(default=1.0, gt=0.0)


class TrainConfig(BaseModel):
    estimator: EstimatorConfig = Field(default_factory=EstimatorConfig)
    optimizer: Literal["adam", "sgd"] = "adam"
    learning_rate: float = Field(default=1e-3, ge=0.0)
    anneal_rate: float = Field(default=1e-5, ge=0.0)
    anneal_period: int = Field(default=1000, ge=1)
    eps_min: float = Field(default=0.1, ge=0.0)
    tau_min: float = Field(default=0.5, gt=0.0)
    epochs: int = Field(default=30, ge=0)
    batch_size: int = Field(default=100, ge=1)
    seed: int = 0
    eval_mc_samples: int = Field(default=1, ge=1)
    supervision: Optional[SupervisionConfig] = None

    @model_validator(mode="after")
    def _eps_floor_positive_for_direct(self):
        if self.estimator.variant == "direct" and self.eps_min <= 0 and self.anneal_rate > 0:
            raise ValueError("an annealed direct estimator needs eps_min > 0")
        return self


def epsilon_at(step: int, config: TrainConfig) -> float:
    """max(eps_min, eps0 * exp(-rate * floor(step / period) * period))."""
    decay = math.exp(-config.anneal_rate * (step // config.anneal_period) * config.anneal_period)
    return max(config.eps_min, config.estimator.eps * decay)


def temperature_at(step: int, config: TrainConfig) -> float:
    decay = math.exp(-config.anneal_rate * (step // config.anneal_period) * config.anneal_period)
    return max(config.tau_min, config.estimator.tau * decay)


def knob_at(step: int, config: TrainConfig) -> float:
    """The annealed bias knob of the configured estimator (0 when it has none)."""
    variant = config.estimator.variant
    if variant == "direct":
        return epsilon_at(step, config)
    if variant == "gsm":
        return temperature_at(step, config)
    return 0.0


def check_compatible(latent: LatentSpec, config: TrainConfig) -> None:
    if latent.kind == "structured":
        variant = config.estimator.variant
        if variant == "gsm" and latent.pairwise != "none":
            raise ConfigurationError(
                f"gsm relaxes independent bits only; pairwise '{latent.pairwise}' needs the direct estimator"
            )
        if variant not in ("direct", "gsm"):
            raise ConfigurationError(
                f"estimator '{variant}' cannot train a structured latent; "
                "use the direct estimator"
            )
        if config.supervision is not None:
            raise ConfigurationError("supervision needs a categorical latent")


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class DvaeModel:
    encoder: MlpParams
    decoder: MlpParams
    latent: LatentSpec

    def __post_init__(self):
        if self.encoder.out_width != self.latent.encoder_width:
            raise ConfigurationError(
                f"encoder emits {self.encoder.out_width}, latent needs {self.latent.encoder_width}"
            )
        if self.decoder.in_width != self.latent.representation_width:
            raise ConfigurationError(
                f"decoder takes {self.decoder.in_width}, latent code is {self.latent.representation_width} wide"
            )
        if self.encoder.in_width != self.decoder.out_width:
            raise ConfigurationError("encoder input and decoder output widths differ")

    @property
    def num_pixels(self) -> int:
        return self.encoder.in_width

    def named_parameters(self) -> Dict[str, np.ndarray]:
        named = dict(self.encoder.named_parameters())
        named.update(self.decoder.named_parameters())
        return named

    def copy(self) -> "DvaeModel":
        return DvaeModel(self.encoder.copy(), self.decoder.copy(), self.latent.model_copy())


def build_model(latent: LatentSpec, num_pixels: int, hidden: int = 300, seed: int = 0) -> DvaeModel:
    """
    x -> FC(hidden) -> ReLU -> FC(latent head), and the matching decoder.
    The decoder draws from its own stream, so models differing only in the
    encoder head start from the same decoder.
    """
    enc_rng, dec_rng = make_rng([seed, 7]), make_rng([seed, 8])
    encoder = init_mlp("encoder", [num_pixels, hidden, latent.encoder_width], ["relu", "identity"], enc_rng)
    decoder = init_mlp("decoder", [latent.representation_width, hidden, num_pixels], ["relu", "identity"], dec_rng)
    return DvaeModel(encoder, decoder, latent)


@dataclass
class TrainState:
    model: DvaeModel
    optimizer: Union[Adam, Sgd]
    step: int = 0
    epoch: int = 0


def init_state(model: DvaeModel, config: TrainConfig) -> TrainState:
    if config.optimizer == "adam":
        optimizer = Adam(learning_rate=config.learning_rate)
    else:
        optimizer = Sgd(config.learning_rate)
    return TrainState(model, optimizer)


@dataclass
class StepMetrics:
    step: int
    elbo: float
    kl: float
    knob: float
    supervised: bool = False


# ---------------------------------------------------------------------------
# KL terms
# ---------------------------------------------------------------------------


def kl_categorical_uniform(log_probs) -> Union[float, np.ndarray]:
    """KL(q || uniform over k) = sum_z q log q + log k; rows for 2-D input."""
    lp = np.asarray(log_probs, dtype=np.float64)
    mass = np.exp(lp).sum(axis=-1)
    if np.any(np.abs(mass - 1.0) > 1e-9):
        raise ContractError("log_probs must be normalized")
    k = lp.shape[-1]
    q = np.exp(lp)
    terms = np.where(q > 0, q * lp, 0.0)
    kl = np.maximum(terms.sum(axis=-1) + math.log(k), 0.0)
    return float(kl) if lp.ndim == 1 else kl


def kl_bits_uniform(unary: np.ndarray) -> Union[float, np.ndarray]:
    """KL of a factorized n-bit posterior from unary (..., n, 2) log-potentials."""
    u = np.asarray(unary, dtype=np.float64)
    lp = u - np.logaddexp(u[..., :1], u[..., 1:])
    q = np.exp(lp)
    kl = np.maximum((q * lp).sum(axis=(-1, -2)) + u.shape[-2] * math.log(2.0), 0.0)
    return float(kl) if u.ndim == 2 else kl


def kl_structured_uniform(p: PairwisePotentials) -> float:
    """Exact KL to the uniform prior over 2^n assignments, by enumeration."""
    if p.n > MAX_KL_BITS:
        raise CapacityError(f"structured KL enumerates 2^n states, n={p.n} > {MAX_KL_BITS}")
    scores = assignment_scores(p)
    return kl_categorical_uniform(scores - np.logaddexp.reduce(scores))


def _kl_categorical_node(log_probs: Tensor, tape: Tape) -> Tensor:
    batch, k = log_probs.shape
    neg_entropy = total(mul(exp(log_probs, tape), log_probs, tape), tape)
    return add(neg_entropy, tape.constant(np.asarray(batch * math.log(k))), tape)


def _bit_difference(n: int) -> np.ndarray:
    """(2n, n) map from a two-hot unary row to u_i(1) - u_i(0)."""
    diff = np.zeros((2 * n, n))
    diff[2 * np.arange(n), np.arange(n)] = -1.0
    diff[2 * np.arange(n) + 1, np.arange(n)] = 1.0
    return diff


def _kl_bits_node(unary: Tensor, n: int, tape: Tape) -> Tensor:
    batch = unary.shape[0]
    d = matmul(unary, tape.constant(_bit_difference(n)), tape)
    minus_d = scale(d, -1.0, tape)
    log_q1 = scale(softplus(minus_d, tape), -1.0, tape)
    log_q0 = scale(softplus(d, tape), -1.0, tape)
    neg_entropy = add(
        total(mul(sigmoid(d, tape), log_q1, tape), tape),
        total(mul(sigmoid(minus_d, tape), log_q0, tape), tape),
        tape,
    )
    return add(neg_entropy, tape.constant(np.asarray(batch * n * math.log(2.0))), tape)


def _kl_pairwise_node(unary: Tensor, alpha: Tensor, n: int, tape: Tape) -> Tensor:
    if n > MAX_KL_BITS:
        raise CapacityError(f"structured KL enumerates 2^n states, n={n} > {MAX_KL_BITS}")
    bits = all_assignments(n).astype(np.float64)
    unary_features = two_hot(bits)
    pair_features = np.stack([bits[:, i] * bits[:, j] for i, j in edge_list(n)], axis=1)
    scores = add(
        matmul(unary, tape.constant(unary_features.T), tape),
        matmul(alpha, tape.constant(pair_features.T), tape),
        tape,
    )
    return _kl_categorical_node(log_softmax(scores, tape), tape)


# ---------------------------------------------------------------------------
# structured heads
# ---------------------------------------------------------------------------


def _structured_heads(head: Tensor, latent: LatentSpec, tape: Tape) -> Tuple[Tensor, Optional[Tensor]]:
    n2 = 2 * latent.n
    unary = columns(head, 0, n2, tape)
    if latent.pairwise == "none":
        return unary, None
    raw = columns(head, n2, n2 + latent.num_edges, tape)
    alpha = softplus(raw, tape) if latent.pairwise == "supermodular" else raw
    return unary, alpha


def _potentials(latent: LatentSpec, unary_row: np.ndarray, alpha_row: Optional[np.ndarray]) -> PairwisePotentials:
    edges = {}
    if alpha_row is not None:
        edges = dict(zip(edge_list(latent.n), alpha_row.tolist()))
    return PairwisePotentials(latent.n, unary_row.reshape(latent.n, 2), edges)


def structured_potentials(model: DvaeModel, x) -> List[PairwisePotentials]:
    """Per-row encoder potentials h_phi(x, .) for a structured model."""
    tape = Tape()
    rows = np.atleast_2d(np.asarray(x, dtype=np.float64))
    unary, alpha = _structured_heads(forward_mlp(model.encoder, rows, tape), model.latent, tape)
    return [
        _potentials(model.latent, unary.data[b], None if alpha is None else alpha.data[b])
        for b in range(rows.shape[0])
    ]


def _pair_products(bits: np.ndarray, n: int) -> np.ndarray:
    return np.array([bits[i] * bits[j] for i, j in edge_list(n)], dtype=np.float64)


def _kl_node_for(model: DvaeModel, head: Tensor, tape: Tape):
    latent = model.latent
    if latent.kind == "categorical":
        log_probs = log_softmax(head, tape)
        return _kl_categorical_node(log_probs, tape), log_probs, None, None
    unary, alpha = _structured_heads(head, latent, tape)
    if alpha is None:
        return _kl_bits_node(unary, latent.n, tape), None, unary, None
    return _kl_pairwise_node(unary, alpha, latent.n, tape), None, unary, alpha


def relaxed_two_hot(unary: Tensor, gumbel, tau: float, tape: Tape) -> Tensor:
    """
    Per-bit Gumbel-softmax of a two-hot unary head: coordinate i becomes
    [sigmoid(-d_i / tau), sigmoid(d_i / tau)] with d_i the perturbed u_i(1) - u_i(0).
    """
    if tau <= 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    batch, width = unary.shape
    n = width // 2
    g = np.asarray(getattr(gumbel, "values", gumbel), dtype=np.float64)
    if g.size != batch * width:
        raise ContractError(f"need a ({batch}, {n}, 2) gumbel draw, got {g.shape}")
    perturbed = add(unary, tape.constant(g.reshape(batch, width)), tape)
    d = scale(matmul(perturbed, tape.constant(_bit_difference(n)), tape), 1.0 / tau, tape)
    place_off = np.zeros((n, width))
    place_off[np.arange(n), 2 * np.arange(n)] = 1.0
    place_on = np.zeros((n, width))
    place_on[np.arange(n), 2 * np.arange(n) + 1] = 1.0
    return add(
        matmul(sigmoid(scale(d, -1.0, tape), tape), tape.constant(place_off), tape),
        matmul(sigmoid(d, tape), tape.constant(place_on), tape),
        tape,
    )


def structured_gsm_gradient(model: DvaeModel, x, gumbel, tau: float) -> GradientMap:
    """Batch-mean ascent gradient of f(x, relaxed two-hot) for uncoupled bits."""
    if model.latent.kind != "structured" or model.latent.pairwise != "none":
        raise ConfigurationError("the relaxed structured gradient needs uncoupled bits")
    rows = np.atleast_2d(np.asarray(x, dtype=np.float64))
    batch = rows.shape[0]
    tape = Tape()
    head = forward_mlp(model.encoder, rows, tape)
    unary, _ = _structured_heads(head, model.latent, tape)
    relaxed = relaxed_two_hot(unary, gumbel, tau, tape)
    loss = bce_loss(forward_mlp(model.decoder, relaxed, tape), rows, tape)
    return backward(tape, scale(loss, -1.0 / batch, tape))


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------


def elbo(model: DvaeModel, x, z, kl_value) -> Union[float, np.ndarray]:
    """
    Negative bound contribution -f(x, z) + KL for one sampled latent per row.
    z is an index (categorical) or a bit vector (structured).
    """
    rows = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if model.latent.kind == "categorical":
        codes = one_hot(np.atleast_1d(z), model.latent.k)
    else:
        codes = two_hot(np.atleast_2d(z))
    recon = bce_rows(mlp_values(model.decoder, codes), rows)
    value = recon + np.asarray(kl_value, dtype=np.float64)
    return float(value[0]) if np.ndim(x) == 1 else value


def _descend(state: TrainState, grads: GradientMap) -> None:
    check_finite(f"step {state.step}", grads)
    state.optimizer.step(state.model.named_parameters(), grads)
    state.step += 1


def _kl_gradient(model: DvaeModel, x: np.ndarray) -> Tuple[GradientMap, float]:
    tape = Tape()
    head = forward_mlp(model.encoder, x, tape)
    kl_node = _kl_node_for(model, head, tape)[0]
    batch = x.shape[0]
    grads = backward(tape, scale(kl_node, 1.0 / batch, tape))
    return grads, float(kl_node.data) / batch


def _categorical_step(state: TrainState, x: np.ndarray, config: TrainConfig, rng) -> StepMetrics:
    model = state.model
    variant = config.estimator.variant
    knob = knob_at(state.step, config)
    ascent = estimate(config.estimator, model.encoder, model.decoder, x, rng, eps=knob, tau=knob)
    kl_grads, kl_value = _kl_gradient(model, x)

    # metric: exact expected reconstruction under q
    q = np.exp(encoder_log_probs(model.encoder, x))
    recon = float(np.mean(np.sum(-q * log_likelihood_table(model.decoder, x, model.latent.k), axis=1)))
    check_finite("train elbo", recon + kl_value)

    grads = {key: -g for key, g in ascent.items()}
    for key, g in kl_grads.items():
        if key.startswith("encoder."):
            grads[key] = grads.get(key, 0.0) + g
    _descend(state, grads)
    return StepMetrics(state.step, recon + kl_value, kl_value, knob)


def _structured_step(state: TrainState, x: np.ndarray, config: TrainConfig, rng) -> StepMetrics:
    model = state.model
    latent = model.latent
    n = latent.n
    batch = x.shape[0]
    eps = epsilon_at(state.step, config)

    tape = Tape()
    head = forward_mlp(model.encoder, x, tape)
    kl_node, _, unary, alpha = _kl_node_for(model, head, tape)

    unary_w = np.zeros(unary.shape)
    alpha_w = None if alpha is None else np.zeros(alpha.shape)
    z_stars = np.zeros((batch, n), dtype=np.int64)
    for b in range(batch):
        p = _potentials(latent, unary.data[b], None if alpha is None else alpha.data[b])
        gamma = sample_gumbel((n, 2), rng)
        z_star = structured_map(p, gamma)
        f_tilde = decoder_lowdim_approx(model.decoder, x[b], z_star)
        z_eps = structured_perturbed_argmax(p, f_tilde, eps, gamma)
        z_stars[b] = z_star
        unary_w[b] = two_hot(z_eps) - two_hot(z_star)
        if alpha_w is not None:
            alpha_w[b] = _pair_products(z_eps, n) - _pair_products(z_star, n)

    direct = weighted_sum(unary, unary_w / (eps * batch), tape)
    if alpha is not None:
        direct = add(direct, weighted_sum(alpha, alpha_w / (eps * batch), tape), tape)
    objective = add(scale(kl_node, 1.0 / batch, tape), scale(direct, -1.0, tape), tape)
    enc_grads = backward(tape, objective)

    dec_tape = Tape()
    logits = forward_mlp(model.decoder, two_hot(z_stars), dec_tape)
    recon = bce_loss(logits, x, dec_tape)
    dec_grads = backward(dec_tape, scale(recon, 1.0 / batch, dec_tape))

    kl_value = float(kl_node.data) / batch
    recon_value = float(recon.data) / batch
    check_finite("train elbo", recon_value + kl_value)
    grads = dict(enc_grads)
    grads.update(dec_grads)
    _descend(state, grads)
    return StepMetrics(state.step, recon_value + kl_value, kl_value, eps)


def _structured_relaxed_step(state: TrainState, x: np.ndarray, config: TrainConfig, rng) -> StepMetrics:
    model = state.model
    n = model.latent.n
    batch = x.shape[0]
    tau = temperature_at(state.step, config)
    gamma = sample_gumbel((batch, n, 2), rng)
    ascent = structured_gsm_gradient(model, x, gamma, tau)
    kl_grads, kl_value = _kl_gradient(model, x)

    # metric: hard bits under the same draw
    unary = mlp_values(model.encoder, x)[:, : 2 * n].reshape(batch, n, 2)
    z = np.argmax(unary + gamma.values, axis=2)
    recon = float(np.mean(bce_rows(mlp_values(model.decoder, two_hot(z)), x)))
    check_finite("train elbo", recon + kl_value)

    grads = {key: -g for key, g in ascent.items()}
    for key, g in kl_grads.items():
        grads[key] = grads.get(key, 0.0) + g
    _descend(state, grads)
    return StepMetrics(state.step, recon + kl_value, kl_value, tau)


def train_step(state: TrainState, batch, config: TrainConfig, rng) -> Tuple[TrainState, StepMetrics]:
    """One optimizer update on an unlabeled minibatch."""
    check_compatible(state.model.latent, config)
    x = np.atleast_2d(np.asarray(getattr(batch, "images", batch), dtype=np.float64))
    if x.shape[0] == 0:
        raise ContractError("empty batch")
    if state.model.latent.kind == "categorical":
        metrics = _categorical_step(state, x, config, rng)
    elif config.estimator.variant == "gsm":
        metrics = _structured_relaxed_step(state, x, config, rng)
    else:
        metrics = _structured_step(state, x, config, rng)
    return state, metrics


def supervised_gradient(encoder: MlpParams, x, labels, gumbel, eps: float) -> GradientMap:
    """
    (grad h(x, z_true) - grad h(x, z*)) / eps: the perturbed prediction is
    pinned to the label, z* shares the Gumbel draw.
    """
    if eps <= 0:
        raise DomainError("supervised term is undefined at eps = 0")
    rows = np.atleast_2d(np.asarray(x, dtype=np.float64))
    batch = rows.shape[0]
    k = encoder.out_width
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if np.any(y < 0) or np.any(y >= k):
        raise DomainError(f"labels must lie in [0, {k})")
    g = (gumbel.values if hasattr(gumbel, "values") else np.asarray(gumbel)).reshape(batch, k)

    tape = Tape()
    log_probs = log_softmax(forward_mlp(encoder, rows, tape), tape)
    z_star = gumbel_max_sample(log_probs.data, g)
    weights = (one_hot(y, k) - one_hot(z_star, k)) / (eps * batch)
    return backward(tape, weighted_sum(log_probs, weights, tape))


def semi_supervised_step(
    state: TrainState,
    batch,
    config: TrainConfig,
    rng,
) -> Tuple[TrainState, StepMetrics]:
    """Labeled update: supervised encoder term, grad f(x, z*) for the decoder, KL as usual."""
    model = state.model
    if model.latent.kind != "categorical":
        raise ConfigurationError("supervision needs a categorical latent")
    x = np.atleast_2d(np.asarray(batch.images, dtype=np.float64))
    labels = np.asarray(batch.labels, dtype=np.int64)
    k = model.latent.k
    size = x.shape[0]
    eps = epsilon_at(state.step, config)
    weight = config.supervision.weight if config.supervision else 1.0

    gamma = sample_gumbel((size, k), rng)
    sup = supervised_gradient(model.encoder, x, labels, gamma, eps)
    z_star = gumbel_max_sample(encoder_log_probs(model.encoder, x), gamma.values)

    dec_tape = Tape()
    logits = forward_mlp(model.decoder, one_hot(z_star, k), dec_tape)
    recon = bce_loss(logits, x, dec_tape)
    dec_grads = backward(dec_tape, scale(recon, 1.0 / size, dec_tape))
    kl_grads, kl_value = _kl_gradient(model, x)

    grads = {key: kl_grads[key] - weight * sup[key] for key in sup}
    grads.update(dec_grads)
    recon_value = float(recon.data) / size
    check_finite("labeled elbo", recon_value + kl_value)
    _descend(state, grads)
    return state, StepMetrics(state.step, recon_value + kl_value, kl_value, eps, supervised=True)


# ---------------------------------------------------------------------------
# evaluation and the epoch loop
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    loss: float
    std_error: float
    accuracy: Optional[float]
    mc_samples: int


def evaluate(model: DvaeModel, dataset: Dataset, mc_samples: int = 1, seed: int = 0) -> EvalResult:
    """
    Mean over the dataset of -f(x, z*) (averaged over `mc_samples` Gumbel
    draws) plus KL; accuracy of argmax_z h(x, z) against labels when present.
    """
    if mc_samples < 1:
        raise ContractError("mc_samples must be >= 1")
    rng = make_rng([seed, 99])
    x = dataset.images
    latent = model.latent
    accuracy = None

    if latent.kind == "categorical":
        log_probs = encoder_log_probs(model.encoder, x)
        table = log_likelihood_table(model.decoder, x, latent.k)
        recon = np.zeros(len(dataset))
        for _ in range(mc_samples):
            z = gumbel_max_sample(log_probs, sample_gumbel(log_probs.shape, rng))
            recon += -table[np.arange(len(dataset)), z]
        per_image = recon / mc_samples + kl_categorical_uniform(log_probs)
        if dataset.labels is not None:
            accuracy = float(np.mean(np.argmax(log_probs, axis=1) == dataset.labels))
    else:
        potentials = structured_potentials(model, x)
        per_image = np.zeros(len(dataset))
        for b, p in enumerate(potentials):
            codes = np.stack(
                [structured_map(p, sample_gumbel((latent.n, 2), rng)) for _ in range(mc_samples)]
            )
            recon = bce_rows(mlp_values(model.decoder, two_hot(codes)), x[b][None, :])
            kl = kl_bits_uniform(p.unary) if latent.pairwise == "none" else kl_structured_uniform(p)
            per_image[b] = recon.mean() + kl

    stderr = float(per_image.std(ddof=1) / np.sqrt(len(per_image))) if len(per_image) > 1 else 0.0
    return EvalResult(float(per_image.mean()), stderr, accuracy, mc_samples)


def select_labeled(dataset: Dataset, num_labels: int, seed: int = 0) -> Dataset:
    """Class-balanced labeled subset drawn with a fixed seed."""
    if dataset.labels is None:
        raise ConfigurationError("supervision needs a labeled training set")
    order = np.random.default_rng([seed, 13]).permutation(len(dataset))
    classes = np.unique(dataset.labels)
    per_class = max(1, math.ceil(num_labels / len(classes)))
    picked = []
    for c in classes:
        picked.extend(order[dataset.labels[order] == c][:per_class].tolist())
    picked = sorted(picked, key=lambda i: int(np.flatnonzero(order == i)[0]))[:num_labels]
    idx = np.asarray(picked, dtype=np.int64)
    return Dataset(dataset.images[idx], dataset.labels[idx], dataset.split, dataset.image_shape)


EpochCallback = Callable[[TrainState, Dict[str, float]], None]


def fit(
    state: TrainState,
    train: Dataset,
    test: Dataset,
    config: TrainConfig,
    on_epoch: Optional[EpochCallback] = None,
    wall_clock: bool = True,
) -> List[Dict[str, float]]:
    """
    Run epochs state.epoch .. config.epochs-1. Every epoch draws its own
    streams from (seed, epoch), so a resumed run repeats the same updates.
    With supervision, one labeled batch follows every u unlabeled batches,
    u = ceil(|train| / |labeled|).
    """
    check_compatible(state.model.latent, config)
    labeled = None
    every = 0
    if config.supervision is not None:
        labeled = select_labeled(train, config.supervision.num_labels, config.seed)
        every = math.ceil(len(train) / len(labeled))

    history = []
    while state.epoch < config.epochs:
        epoch = state.epoch
        rng = make_rng([config.seed, epoch])
        started = time.monotonic()
        step_ms, elbos = [], []
        labeled_batches = iter(()) if labeled is None else batch_iterator(
            labeled, config.batch_size, seed=config.seed * 1000 + epoch + 1
        )

        for i, batch in enumerate(batch_iterator(train, config.batch_size, seed=config.seed * 1000 + epoch)):
            t0 = time.monotonic()
            _, m = train_step(state, batch, config, rng)
            elbos.append(m.elbo)
            if labeled is not None and (i + 1) % every == 0:
                lb = next(labeled_batches, None)
                if lb is None:
                    labeled_batches = batch_iterator(labeled, config.batch_size, seed=config.seed * 1000 + epoch + 1)
                    lb = next(labeled_batches)
                semi_supervised_step(state, lb, config, rng)
            step_ms.append((time.monotonic() - t0) * 1000.0)

        result = evaluate(state.model, test, config.eval_mc_samples, seed=config.seed)
        check_finite("test loss", result.loss)
        state.epoch += 1
        knob = knob_at(state.step, config)
        row = {
            "epoch": state.epoch,
            "step": state.step,
            "train_elbo": float(np.mean(elbos)) if elbos else float("nan"),
            "test_elbo": result.loss,
            "epsilon": knob,
            "accuracy": float("nan") if result.accuracy is None else result.accuracy,
            "wall_ms": (time.monotonic() - started) * 1000.0 if wall_clock else 0.0,
            "step_ms_median": float(np.median(step_ms)) if (step_ms and wall_clock) else 0.0,
        }
        logger.info(
            "epoch %d step %d train %.3f test %.3f knob %.3g acc %s",
            row["epoch"], row["step"], row["train_elbo"], row["test_elbo"], row["epsilon"],
            "-" if result.accuracy is None else f"{result.accuracy:.3f}",
        )
        history.append(row)
        if on_epoch is not None:
            on_epoch(state, row)
    return history
