# src/estimators.py

"""
Gradient estimators for grad_phi E_{z ~ q_phi(.|x)}[f_theta(x, z)] with a
categorical latent z in {0..k-1}, and the bias/variance profiling harness.

Conventions shared by every estimator here:
  * h_phi(x, .) is the log-softmax of the encoder output, q = exp(h).
  * f_theta(x, z) is the Bernoulli log-likelihood of x under the decoder
    applied to the one-hot code of z (the negative summed BCE).
  * x is a batch of rows; returned gradients are batch means.
  * Returned maps hold ascent directions of the reconstruction term for
    both encoder ("encoder.*") and decoder ("decoder.*") parameters.
"""

import logging
from typing import List, Literal, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator, model_validator

from .gumbel_sampling import (
    GumbelDraw,
    gumbel_max_sample,
    gumbel_softmax_relax,
    make_rng,
    one_hot,
    perturbed_argmax,
    sample_gumbel,
)
from .tensor_autodiff import (
    ContractError,
    DomainError,
    GradientMap,
    MlpParams,
    Tape,
    backward,
    bce_loss,
    forward_mlp,
    log_softmax,
    mlp_values,
    scale,
    weighted_bce_loss,
    weighted_sum,
)

logger = logging.getLogger(__name__)

Variant = Literal["unbiased_enum", "direct", "gsm", "score_function"]


class EstimatorConfig(BaseModel):
    variant: Variant = "direct"
    eps: float = Field(default=1.0, ge=0.0)
    tau: float = Field(default=1.0, gt=0.0)
    samples_per_step: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _direct_needs_positive_eps(self):
        if self.variant == "direct" and self.eps <= 0:
            raise ValueError("direct estimator needs eps > 0")
        return self

    @property
    def knob(self) -> float:
        if self.variant == "direct":
            return self.eps
        if self.variant == "gsm":
            return self.tau
        return 0.0


class GradientStats(BaseModel):
    variant: str
    knob: float
    bias_l2: float
    mean_std: float
    trials: int = Field(ge=2)
    mean: List[float]
    std: List[float]

    @field_validator("bias_l2", "mean_std")
    @classmethod
    def _finite(cls, v: float) -> float:
        if not np.isfinite(v):
            raise ValueError("bias and std must be finite")
        return v


# ---------------------------------------------------------------------------
# shared pieces
# ---------------------------------------------------------------------------


def _rows(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return arr.reshape(1, -1) if arr.ndim == 1 else arr


def log_likelihood_table(decoder: MlpParams, x, k: int) -> np.ndarray:
    """F[b, z] = f_theta(x_b, z) from one batched decoder pass over all k codes."""
    rows = _rows(x)
    logits = mlp_values(decoder, np.eye(k))
    return -(rows @ np.logaddexp(0.0, -logits).T + (1.0 - rows) @ np.logaddexp(0.0, logits).T)


def encoder_log_probs(encoder: MlpParams, x) -> np.ndarray:
    tape = Tape()
    return log_softmax(forward_mlp(encoder, _rows(x), tape), tape).data


def _check_widths(encoder: MlpParams, decoder: MlpParams, k: int) -> None:
    if encoder.out_width != k:
        raise ContractError(f"encoder emits {encoder.out_width} logits, expected k={k}")
    if decoder.in_width != k:
        raise ContractError(f"decoder takes width {decoder.in_width}, expected k={k}")


def _encoder_grad(encoder: MlpParams, x: np.ndarray, weights: np.ndarray) -> GradientMap:
    """grad_phi sum_{b,z} weights[b, z] * h_phi(x_b, z) for constant weights."""
    tape = Tape()
    log_probs = log_softmax(forward_mlp(encoder, x, tape), tape)
    return backward(tape, weighted_sum(log_probs, weights, tape))


def _decoder_grad(decoder: MlpParams, x: np.ndarray, weights: np.ndarray) -> GradientMap:
    """grad_theta sum_{b,z} weights[b, z] * f_theta(x_b, z) for constant weights >= 0."""
    k = decoder.in_width
    tape = Tape()
    logits = forward_mlp(decoder, np.eye(k), tape)
    pos = weights.T @ x
    neg = weights.T @ (1.0 - x)
    loss = weighted_bce_loss(logits, pos, neg, tape)
    return backward(tape, scale(loss, -1.0, tape))


def _merge(*maps: GradientMap) -> GradientMap:
    merged: GradientMap = {}
    for m in maps:
        merged.update(m)
    return merged


def sample_posterior(encoder: MlpParams, x, rng: np.random.Generator) -> np.ndarray:
    """One z per row of x drawn from q_phi(.|x) with the Gumbel-Max trick."""
    log_probs = encoder_log_probs(encoder, x)
    return np.atleast_1d(gumbel_max_sample(log_probs, sample_gumbel(log_probs.shape, rng)))


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------


def unbiased_gradient(encoder: MlpParams, decoder: MlpParams, x, k: int) -> GradientMap:
    """Exact gradient by enumerating every latent value."""
    _check_widths(encoder, decoder, k)
    rows = _rows(x)
    batch = rows.shape[0]
    q = np.exp(encoder_log_probs(encoder, rows))
    table = log_likelihood_table(decoder, rows, k)
    return _merge(
        _encoder_grad(encoder, rows, q * table / batch),
        _decoder_grad(decoder, rows, q / batch),
    )


def direct_gradient(
    encoder: MlpParams,
    decoder: MlpParams,
    x,
    gumbel: GumbelDraw,
    eps: float,
) -> GradientMap:
    """
    (grad h(x, z*(eps)) - grad h(x, z*)) / eps with z* and z*(eps) sharing
    one Gumbel draw per row; decoder gets grad f(x, z*).
    """
    if eps <= 0:
        raise DomainError("direct estimator is undefined at eps = 0")
    rows = _rows(x)
    batch = rows.shape[0]
    k = encoder.out_width
    _check_widths(encoder, decoder, k)
    g = gumbel.values.reshape(batch, k)

    log_probs = encoder_log_probs(encoder, rows)
    z_star = gumbel_max_sample(log_probs, g)
    table = log_likelihood_table(decoder, rows, k)
    z_eps = perturbed_argmax(log_probs, table, eps, g)

    star = one_hot(z_star, k)
    weights = (one_hot(z_eps, k) - star) / (eps * batch)
    return _merge(
        _encoder_grad(encoder, rows, weights),
        _decoder_grad(decoder, rows, star / batch),
    )


def gsm_gradient(
    encoder: MlpParams,
    decoder: MlpParams,
    x,
    gumbel: GumbelDraw,
    tau: float,
) -> GradientMap:
    """Backpropagation through the decoder applied to the relaxed sample."""
    if tau <= 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    rows = _rows(x)
    batch = rows.shape[0]
    k = encoder.out_width
    _check_widths(encoder, decoder, k)

    tape = Tape()
    log_probs = log_softmax(forward_mlp(encoder, rows, tape), tape)
    relaxed = gumbel_softmax_relax(log_probs, gumbel.values.reshape(batch, k), tau, tape)
    logits = forward_mlp(decoder, relaxed, tape)
    loss = bce_loss(logits, rows, tape)
    return backward(tape, scale(loss, -1.0 / batch, tape))


def score_function_gradient(encoder: MlpParams, decoder: MlpParams, x, z) -> GradientMap:
    """f(x, z) * grad log q(z|x) without a baseline; decoder gets grad f(x, z)."""
    rows = _rows(x)
    batch = rows.shape[0]
    k = encoder.out_width
    _check_widths(encoder, decoder, k)
    codes = one_hot(np.atleast_1d(z), k)
    if codes.shape != (batch, k):
        raise ContractError(f"need one sampled z per row, got {np.shape(z)}")
    f = np.sum(log_likelihood_table(decoder, rows, k) * codes, axis=1, keepdims=True)
    return _merge(
        _encoder_grad(encoder, rows, codes * f / batch),
        _decoder_grad(decoder, rows, codes / batch),
    )


def estimate(
    config: EstimatorConfig,
    encoder: MlpParams,
    decoder: MlpParams,
    x,
    rng: np.random.Generator,
    eps: Optional[float] = None,
    tau: Optional[float] = None,
) -> GradientMap:
    """
    One estimator call per config, averaged over `samples_per_step` draws.
    `eps` / `tau` override the config knob (annealed values).
    """
    rows = _rows(x)
    k = encoder.out_width
    if config.variant == "unbiased_enum":
        return unbiased_gradient(encoder, decoder, rows, k)

    draws = []
    for _ in range(config.samples_per_step):
        if config.variant == "direct":
            g = sample_gumbel((rows.shape[0], k), rng)
            draws.append(direct_gradient(encoder, decoder, rows, g, config.eps if eps is None else eps))
        elif config.variant == "gsm":
            g = sample_gumbel((rows.shape[0], k), rng)
            draws.append(gsm_gradient(encoder, decoder, rows, g, config.tau if tau is None else tau))
        else:
            z = sample_posterior(encoder, rows, rng)
            draws.append(score_function_gradient(encoder, decoder, rows, z))
    if len(draws) == 1:
        return draws[0]
    return {key: np.mean([d[key] for d in draws], axis=0) for key in draws[0]}


def prediction_generating_function(logits, f_values, eps: float, gumbel) -> float:
    """
    Monte-Carlo estimate of G(eps) = E_gamma[max_z {eps f + h + gamma}]
    over the leading axis of the Gumbel draws.
    """
    h = np.asarray(logits, dtype=np.float64)
    f = np.asarray(f_values, dtype=np.float64)
    g = gumbel.values if isinstance(gumbel, GumbelDraw) else np.asarray(gumbel)
    return float(np.mean(np.max(eps * f + h + g, axis=-1)))


# ---------------------------------------------------------------------------
# bias / variance
# ---------------------------------------------------------------------------


def flatten_encoder(grads: GradientMap, encoder: MlpParams) -> np.ndarray:
    return np.concatenate([grads[name].ravel() for name in encoder.named_parameters()])


def bias_variance_profile(
    configs: Sequence[EstimatorConfig],
    reference: GradientMap,
    trials: int,
    encoder: MlpParams,
    decoder: MlpParams,
    x,
    seed: int = 0,
) -> List[GradientStats]:
    """
    For each config, `trials` independent encoder-gradient estimates at fixed
    parameters; bias is the L2 distance of their mean from `reference`.
    """
    if trials < 2:
        raise ContractError(f"need at least 2 trials, got {trials}")
    rows = _rows(x)
    ref = flatten_encoder(reference, encoder)
    out: List[GradientStats] = []

    for c_idx, config in enumerate(configs):
        if config.variant == "unbiased_enum":
            # deterministic: every trial returns the same vector
            mean = flatten_encoder(estimate(config, encoder, decoder, rows, make_rng(seed)), encoder)
            std = np.zeros_like(mean)
        else:
            children = np.random.SeedSequence([seed, c_idx]).spawn(trials)
            samples = np.stack(
                [
                    flatten_encoder(estimate(config, encoder, decoder, rows, make_rng(child)), encoder)
                    for child in children
                ]
            )
            mean = samples.mean(axis=0)
            std = samples.std(axis=0, ddof=1)

        stats = GradientStats(
            variant=config.variant,
            knob=config.knob,
            bias_l2=float(np.linalg.norm(mean - ref)),
            mean_std=float(std.mean()),
            trials=trials,
            mean=mean.tolist(),
            std=std.tolist(),
        )
        logger.info(
            "profile %s knob=%g bias=%.4g mean_std=%.4g",
            stats.variant, stats.knob, stats.bias_l2, stats.mean_std,
        )
        out.append(stats)
    return out


def stats_frame(rows: Sequence[GradientStats]) -> pd.DataFrame:
    """GradientStats rows as the CSV table knob,bias_l2,mean_std,trials,variant."""
    return pd.DataFrame(
        [
            {
                "knob": r.knob,
                "bias_l2": r.bias_l2,
                "mean_std": r.mean_std,
                "trials": r.trials,
                "variant": r.variant,
            }
            for r in rows
        ],
        columns=["knob", "bias_l2", "mean_std", "trials", "variant"],
    )
