# src/gumbel_sampling.py

"""
Zero-mean Gumbel noise and the argmax samplers built on it: Gumbel-Max,
the loss-perturbed argmax z*(eps), and the Gumbel-Softmax relaxation.

Ties in every argmax go to the lowest index.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import softmax

from .tensor_autodiff import (
    ContractError,
    DomainError,
    Tape,
    Tensor,
    add,
    exp,
    log_softmax,
    scale,
)

logger = logging.getLogger(__name__)

EULER_GAMMA = 0.5772156649015329
_U_LOW = 1e-300
_U_HIGH = float(np.nextafter(1.0, 0.0))


@dataclass
class GumbelDraw:
    values: np.ndarray
    seed: Optional[int] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape


def make_rng(seed: Union[int, Sequence[int], np.random.SeedSequence]) -> np.random.Generator:
    """Counter-based stream; replaying the same seed replays the same noise."""
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(seed))


def spawn_rngs(seed: int, count: int) -> list:
    return [make_rng(child) for child in np.random.SeedSequence(seed).spawn(count)]


def sample_gumbel(
    count: Union[int, Tuple[int, ...]],
    rng: np.random.Generator,
    seed: Optional[int] = None,
) -> GumbelDraw:
    """
    i.i.d. zero-mean Gumbel values: -log(-log U) - c, U ~ Uniform(0, 1).
    `count` may be a shape, e.g. (batch, k) or (n, 2).
    """
    shape = (count,) if isinstance(count, (int, np.integer)) else tuple(count)
    if any(int(s) < 1 for s in shape):
        raise ContractError(f"gumbel count must be positive, got {shape}")
    u = np.clip(rng.random(shape), _U_LOW, _U_HIGH)
    return GumbelDraw(-np.log(-np.log(u)) - EULER_GAMMA, seed=seed)


def _values(gumbel) -> np.ndarray:
    return gumbel.values if isinstance(gumbel, GumbelDraw) else np.asarray(gumbel, dtype=np.float64)


def gumbel_max_sample(logits, gumbel) -> Union[int, np.ndarray]:
    """argmax(logits + gamma) along the last axis; an int for 1-D input."""
    h = np.asarray(logits, dtype=np.float64)
    g = _values(gumbel)
    if h.size == 0 or h.shape[-1] == 0:
        raise ContractError("gumbel_max_sample needs at least one logit")
    if h.shape != g.shape:
        raise ContractError(f"logits {h.shape} and gumbel {g.shape} differ in shape")
    idx = np.argmax(h + g, axis=-1)
    return int(idx) if h.ndim == 1 else idx


def perturbed_argmax(logits, f_values, eps: float, gumbel) -> Union[int, np.ndarray]:
    """argmax(eps * f + logits + gamma), the loss-perturbed prediction."""
    if eps < 0:
        raise DomainError(f"eps must be non-negative, got {eps}")
    h = np.asarray(logits, dtype=np.float64)
    f = np.asarray(f_values, dtype=np.float64)
    g = _values(gumbel)
    if h.shape != f.shape or h.shape != g.shape:
        raise ContractError(
            f"logits {h.shape}, f_values {f.shape} and gumbel {g.shape} must match"
        )
    if h.size == 0:
        raise ContractError("perturbed_argmax needs at least one logit")
    idx = np.argmax(eps * f + h + g, axis=-1)
    return int(idx) if h.ndim == 1 else idx


def gumbel_softmax_relax(
    logits,
    gumbel,
    tau: float,
    tape: Optional[Tape] = None,
):
    """
    softmax((logits + gamma) / tau). With a tape and a Tensor input the
    relaxation is recorded so gradients flow back to the logits.
    """
    if tau <= 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    g = _values(gumbel)
    if isinstance(logits, Tensor):
        if tape is None:
            raise ContractError("a tape is required to relax a recorded tensor")
        shifted = scale(add(logits, tape.constant(g), tape), 1.0 / tau, tape)
        return exp(log_softmax(shifted, tape), tape)
    h = np.asarray(logits, dtype=np.float64)
    if h.shape != g.shape:
        raise ContractError(f"logits {h.shape} and gumbel {g.shape} differ in shape")
    return softmax((h + g) / tau, axis=-1)


def one_hot(indices, k: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    out = np.zeros(idx.shape + (k,))
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out
