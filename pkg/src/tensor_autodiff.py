# src/tensor_autodiff.py

"""
Dense float64 tensors with an explicit recording tape for reverse-mode
gradients, plus the fully-connected networks and optimizers built on it.

Every forward op appends one record (output, parents, one vector-Jacobian
product per parent) to the tape, so the record list is already in
topological order and `backward` is a single reverse sweep.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, logsumexp, softmax

logger = logging.getLogger(__name__)

GradientMap = Dict[str, np.ndarray]
Vjp = Optional[Callable[[np.ndarray], np.ndarray]]

ACTIVATIONS = ("relu", "identity", "sigmoid")


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    pass


class ContractError(AutodiffError):
    pass


class DomainError(AutodiffError):
    pass


class NumericFailure(AutodiffError):
    pass


@dataclass(eq=False)
class Tensor:
    data: np.ndarray
    tape: Optional["Tape"] = None
    index: int = -1
    name: Optional[str] = None
    requires_grad: bool = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"


@dataclass(eq=False)
class _Record:
    out: Tensor
    parents: Tuple[Tensor, ...]
    vjps: Tuple[Vjp, ...]


class Tape:
    """Ordered record of operations; one tape per forward/backward pass."""

    def __init__(self):
        self.records: List[_Record] = []
        self.parameters: Dict[str, Tensor] = {}

    def __len__(self) -> int:
        return len(self.records)

    def _push(
        self,
        data: np.ndarray,
        parents: Sequence[Tensor] = (),
        vjps: Sequence[Vjp] = (),
        name: Optional[str] = None,
        requires_grad: bool = False,
    ) -> Tensor:
        needs = requires_grad or any(p.requires_grad for p in parents)
        out = Tensor(
            np.asarray(data, dtype=np.float64),
            tape=self,
            index=len(self.records),
            name=name,
            requires_grad=needs,
        )
        # parents that never lead to a parameter get no adjoint
        kept = tuple(v if p.requires_grad else None for p, v in zip(parents, vjps))
        self.records.append(_Record(out, tuple(parents), kept))
        return out

    def constant(self, array) -> Tensor:
        return self._push(np.asarray(array, dtype=np.float64))

    def parameter(self, name: str, array: np.ndarray) -> Tensor:
        """Register a named parameter once per tape; later calls reuse the node."""
        if name in self.parameters:
            return self.parameters[name]
        node = self._push(array, name=name, requires_grad=True)
        self.parameters[name] = node
        return node


def _as_node(value: Union[Tensor, np.ndarray, Sequence[float]], tape: Tape) -> Tensor:
    if isinstance(value, Tensor):
        if value.tape is not tape:
            raise ContractError("tensor recorded on a different tape")
        return value
    return tape.constant(value)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor, tape: Tape) -> Tensor:
    a, b = _as_node(a, tape), _as_node(b, tape)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    av, bv = a.data, b.data
    return tape._push(
        av @ bv,
        (a, b),
        (lambda g: g @ bv.T, lambda g: av.T @ g),
    )


def add(a: Tensor, b: Tensor, tape: Tape) -> Tensor:
    """Elementwise sum; `b` may also be a row vector added to every row of `a`."""
    a, b = _as_node(a, tape), _as_node(b, tape)
    if a.shape == b.shape:
        return tape._push(a.data + b.data, (a, b), (lambda g: g, lambda g: g))
    if b.data.ndim == 1 and a.data.ndim == 2 and a.shape[1] == b.shape[0]:
        return tape._push(
            a.data + b.data,
            (a, b),
            (lambda g: g, lambda g: g.sum(axis=0)),
        )
    raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")


def mul(a: Tensor, b: Tensor, tape: Tape) -> Tensor:
    a, b = _as_node(a, tape), _as_node(b, tape)
    if a.shape != b.shape:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    av, bv = a.data, b.data
    return tape._push(av * bv, (a, b), (lambda g: g * bv, lambda g: g * av))


def scale(a: Tensor, factor: float, tape: Tape) -> Tensor:
    a = _as_node(a, tape)
    factor = float(factor)
    return tape._push(a.data * factor, (a,), (lambda g: g * factor,))


def relu(a: Tensor, tape: Tape) -> Tensor:
    a = _as_node(a, tape)
    mask = (a.data > 0).astype(np.float64)
    return tape._push(a.data * mask, (a,), (lambda g: g * mask,))


def sigmoid(a: Tensor, tape: Tape) -> Tensor:
    a = _as_node(a, tape)
    s = expit(a.data)
    return tape._push(s, (a,), (lambda g: g * s * (1.0 - s),))


def softplus(a: Tensor, tape: Tape) -> Tensor:
    a = _as_node(a, tape)
    av = a.data
    return tape._push(np.logaddexp(0.0, av), (a,), (lambda g: g * expit(av),))


def exp(a: Tensor, tape: Tape) -> Tensor:
    a = _as_node(a, tape)
    e = np.exp(a.data)
    return tape._push(e, (a,), (lambda g: g * e,))


def columns(a: Tensor, start: int, stop: int, tape: Tape) -> Tensor:
    """Slice `a[..., start:stop]`."""
    a = _as_node(a, tape)
    width = a.shape[-1]
    if not 0 <= start <= stop <= width:
        raise ShapeError(f"column slice [{start}:{stop}] outside width {width}")
    full_shape = a.shape

    def vjp(g):
        out = np.zeros(full_shape)
        out[..., start:stop] = g
        return out

    return tape._push(a.data[..., start:stop], (a,), (vjp,))


def total(a: Tensor, tape: Tape) -> Tensor:
    """Sum of every entry, as a scalar node."""
    a = _as_node(a, tape)
    shape = a.shape
    return tape._push(np.asarray(a.data.sum()), (a,), (lambda g: np.full(shape, float(g)),))


def weighted_sum(a: Tensor, weights: np.ndarray, tape: Tape) -> Tensor:
    """Scalar sum(a * weights) with constant weights."""
    return total(mul(a, tape.constant(weights), tape), tape)


def log_softmax(logits: Tensor, tape: Tape) -> Tensor:
    """Normalized log-probabilities along the last axis."""
    a = _as_node(logits, tape)
    if not np.all(np.isfinite(a.data)):
        raise DomainError("log_softmax received non-finite logits")
    out = a.data - logsumexp(a.data, axis=-1, keepdims=True)
    probs = np.exp(out)
    return tape._push(
        out,
        (a,),
        (lambda g: g - probs * g.sum(axis=-1, keepdims=True),),
    )


def weighted_bce_loss(
    logits: Tensor,
    pos_weights: np.ndarray,
    neg_weights: np.ndarray,
    tape: Tape,
) -> Tensor:
    """
    Scalar sum of pos * softplus(-l) + neg * softplus(l), i.e. the Bernoulli
    negative log-likelihood with fractional positive/negative counts.
    """
    a = _as_node(logits, tape)
    pos = np.asarray(pos_weights, dtype=np.float64)
    neg = np.asarray(neg_weights, dtype=np.float64)
    if pos.shape != a.shape or neg.shape != a.shape:
        raise ShapeError(
            f"bce weights {pos.shape}/{neg.shape} do not match logits {a.shape}"
        )
    lv = a.data
    value = np.sum(pos * np.logaddexp(0.0, -lv) + neg * np.logaddexp(0.0, lv))

    def vjp(g):
        s = expit(lv)
        return float(g) * ((pos + neg) * s - pos)

    return tape._push(np.asarray(value), (a,), (vjp,))


def bce_loss(logits: Tensor, targets, tape: Tape) -> Tensor:
    """Summed binary cross-entropy of Bernoulli logits against targets in [0, 1]."""
    t = np.asarray(targets, dtype=np.float64)
    shape = logits.shape if isinstance(logits, Tensor) else np.shape(logits)
    if t.shape != tuple(shape):
        raise ShapeError(f"targets {t.shape} do not match logits {tuple(shape)}")
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise DomainError("bce targets must lie in [0, 1]")
    return weighted_bce_loss(logits, t, 1.0 - t, tape)


def bce_rows(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-row summed binary cross-entropy, no recording."""
    return np.sum(
        targets * np.logaddexp(0.0, -logits) + (1.0 - targets) * np.logaddexp(0.0, logits),
        axis=-1,
    )


def softmax_rows(values: np.ndarray) -> np.ndarray:
    return softmax(values, axis=-1)


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss_node: Tensor) -> GradientMap:
    """
    Gradients of a scalar node with respect to every parameter on the tape.
    Parameters the loss does not reach get zeros of their own shape.
    """
    if loss_node.tape is not tape:
        raise ContractError("loss node is not recorded on this tape")
    if loss_node.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss_node.shape}")

    adjoints: Dict[int, np.ndarray] = {loss_node.index: np.ones_like(loss_node.data)}
    for record in reversed(tape.records[: loss_node.index + 1]):
        g = adjoints.get(record.out.index)
        if g is None:
            continue
        for parent, vjp in zip(record.parents, record.vjps):
            if vjp is None:
                continue
            contribution = vjp(g)
            prev = adjoints.get(parent.index)
            adjoints[parent.index] = contribution if prev is None else prev + contribution

    grads: GradientMap = {}
    for name, node in tape.parameters.items():
        g = adjoints.get(node.index)
        grads[name] = np.zeros_like(node.data) if g is None else np.array(g, dtype=np.float64)
    return grads


def check_finite(label: str, values) -> None:
    """Raise NumericFailure if a loss value or gradient map holds NaN/Inf."""
    if isinstance(values, dict):
        for key, arr in values.items():
            if not np.all(np.isfinite(arr)):
                raise NumericFailure(f"non-finite gradient in {label} ({key})")
        return
    if not np.all(np.isfinite(values)):
        raise NumericFailure(f"non-finite value in {label}")


# ---------------------------------------------------------------------------
# fully-connected networks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    in_width: int
    out_width: int
    activation: str = "relu"


@dataclass
class MlpParams:
    name: str
    layers: List[LayerSpec]
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError(f"network '{self.name}' has no layers")
        for i, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ContractError(f"unknown activation '{layer.activation}' in layer {i}")
            if i > 0 and self.layers[i - 1].out_width != layer.in_width:
                raise ShapeError(
                    f"layer {i} of '{self.name}' takes width {layer.in_width}, "
                    f"previous layer emits {self.layers[i - 1].out_width}"
                )
            if self.weights[i].shape != (layer.in_width, layer.out_width):
                raise ShapeError(f"weight {i} of '{self.name}' has shape {self.weights[i].shape}")
            if self.biases[i].shape != (layer.out_width,):
                raise ShapeError(f"bias {i} of '{self.name}' has shape {self.biases[i].shape}")

    @property
    def in_width(self) -> int:
        return self.layers[0].in_width

    @property
    def out_width(self) -> int:
        return self.layers[-1].out_width

    def named_parameters(self) -> Dict[str, np.ndarray]:
        named = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            named[f"{self.name}.W{i}"] = w
            named[f"{self.name}.b{i}"] = b
        return named

    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.named_parameters().values()))

    def copy(self) -> "MlpParams":
        return MlpParams(
            self.name,
            list(self.layers),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )


def init_mlp(
    name: str,
    widths: Sequence[int],
    activations: Sequence[str],
    rng: np.random.Generator,
) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    if len(activations) != len(widths) - 1:
        raise ContractError("need one activation per layer")
    layers, weights, biases = [], [], []
    for fan_in, fan_out, act in zip(widths[:-1], widths[1:], activations):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append(LayerSpec(int(fan_in), int(fan_out), act))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(name, layers, weights, biases)


def forward_mlp(params: MlpParams, input, tape: Tape) -> Tensor:
    """
    Apply the network to a batch of rows. A 1-D input is treated as a single
    row, so the output is always 2-D.
    """
    if isinstance(input, Tensor):
        h = _as_node(input, tape)
    else:
        arr = np.asarray(input, dtype=np.float64)
        h = tape.constant(arr.reshape(1, -1) if arr.ndim == 1 else arr)
    if h.data.ndim != 2 or h.shape[1] != params.in_width:
        raise ShapeError(
            f"layer 0 of '{params.name}' expects width {params.in_width}, "
            f"got input of shape {h.shape}"
        )
    for i, layer in enumerate(params.layers):
        w = tape.parameter(f"{params.name}.W{i}", params.weights[i])
        b = tape.parameter(f"{params.name}.b{i}", params.biases[i])
        h = add(matmul(h, w, tape), b, tape)
        if layer.activation == "relu":
            h = relu(h, tape)
        elif layer.activation == "sigmoid":
            h = sigmoid(h, tape)
    return h


def mlp_values(params: MlpParams, input: np.ndarray) -> np.ndarray:
    """Forward pass without keeping the tape around."""
    return forward_mlp(params, input, Tape()).data


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class Sgd:
    def __init__(self, learning_rate: float):
        self.learning_rate = float(learning_rate)

    def step(self, params: Dict[str, np.ndarray], grads: GradientMap) -> None:
        for key, p in params.items():
            if key in grads:
                p -= self.learning_rate * grads[key]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        return None


@dataclass
class Adam:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 0
    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: Dict[str, np.ndarray], grads: GradientMap) -> None:
        """In-place descent step on `params` along `grads`."""
        self.steps += 1
        c1 = 1.0 - self.beta1 ** self.steps
        c2 = 1.0 - self.beta2 ** self.steps
        for key, p in params.items():
            g = grads.get(key)
            if g is None:
                continue
            m = self.first.setdefault(key, np.zeros_like(p))
            v = self.second.setdefault(key, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {"adam.steps": np.asarray(self.steps)}
        for key, m in self.first.items():
            state[f"adam.m.{key}"] = m
            state[f"adam.v.{key}"] = self.second[key]
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.steps = int(state.get("adam.steps", 0))
        self.first, self.second = {}, {}
        for key, value in state.items():
            if key.startswith("adam.m."):
                self.first[key[len("adam.m."):]] = np.array(value, dtype=np.float64)
            elif key.startswith("adam.v."):
                self.second[key[len("adam.v."):]] = np.array(value, dtype=np.float64)
