# src/structured_map.py

"""
Pairwise binary latent structures: scoring, exhaustive MAP and partition
oracles, exact MAP by s-t min-cut when every coupling is non-negative, and
the coordinate-flip decoder approximation used for the perturbed argmax.

Scores are maximized. With z_i in {0, 1}:

    score(z) = sum_i unary[i, z_i] + sum_{i<j} alpha_ij z_i z_j + sum_i gamma[i, z_i]
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional, Tuple

import networkx as nx
import numpy as np
from networkx.algorithms.flow import boykov_kolmogorov
from scipy.special import logsumexp

from .gumbel_sampling import GumbelDraw
from .tensor_autodiff import ContractError, MlpParams, bce_rows, mlp_values

logger = logging.getLogger(__name__)

MAX_ENUMERATION_BITS = 20
_CHUNK_BITS = 16
_SOURCE, _SINK = "s", "t"


class CapacityError(Exception):
    pass


class SolverPreconditionError(Exception):
    pass


Assignment = np.ndarray


@dataclass
class PairwisePotentials:
    n: int
    unary: np.ndarray
    edges: Dict[Tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self):
        self.unary = np.asarray(self.unary, dtype=np.float64)
        if self.unary.shape != (self.n, 2):
            raise ContractError(f"unary must have shape ({self.n}, 2), got {self.unary.shape}")
        if not np.all(np.isfinite(self.unary)):
            raise ContractError("unary potentials must be finite")
        clean = {}
        for (i, j), alpha in self.edges.items():
            i, j = int(i), int(j)
            if i > j:
                i, j = j, i
            if i == j or not (0 <= i < self.n and 0 <= j < self.n):
                raise ContractError(f"invalid edge ({i}, {j}) for n={self.n}")
            if not np.isfinite(alpha):
                raise ContractError(f"edge ({i}, {j}) has non-finite weight")
            clean[(i, j)] = clean.get((i, j), 0.0) + float(alpha)
        self.edges = clean

    @property
    def is_supermodular(self) -> bool:
        return all(alpha >= 0 for alpha in self.edges.values())

    def with_unary(self, unary: np.ndarray) -> "PairwisePotentials":
        return PairwisePotentials(self.n, unary, dict(self.edges))

    def to_json(self) -> str:
        doc = {
            "n": self.n,
            "unary": self.unary.tolist(),
            "edges": [{"i": i, "j": j, "alpha": a} for (i, j), a in sorted(self.edges.items())],
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "PairwisePotentials":
        doc = json.loads(text)
        edges = {(e["i"], e["j"]): e["alpha"] for e in doc.get("edges", [])}
        return cls(int(doc["n"]), np.asarray(doc["unary"], dtype=np.float64), edges)


def _perturbed_unary(p: PairwisePotentials, gumbel: Optional[GumbelDraw]) -> np.ndarray:
    if gumbel is None:
        return p.unary
    g = gumbel.values if isinstance(gumbel, GumbelDraw) else np.asarray(gumbel)
    if g.shape != (p.n, 2):
        raise ContractError(f"structured gumbel must have shape ({p.n}, 2), got {g.shape}")
    return p.unary + g


def score(p: PairwisePotentials, z, gumbel: Optional[GumbelDraw] = None) -> float:
    bits = np.asarray(z, dtype=np.int64)
    if bits.shape != (p.n,):
        raise ContractError(f"assignment must have length {p.n}, got {bits.shape}")
    unary = _perturbed_unary(p, gumbel)
    total = float(unary[np.arange(p.n), bits].sum())
    for (i, j), alpha in p.edges.items():
        if bits[i] and bits[j]:
            total += alpha
    return total


def _assignment_chunks(n: int) -> Iterator[np.ndarray]:
    """All 2^n bit vectors in lexicographic order (coordinate 0 most significant)."""
    shifts = np.arange(n - 1, -1, -1, dtype=np.int64)
    chunk = 1 << min(n, _CHUNK_BITS)
    for start in range(0, 1 << n, chunk):
        codes = np.arange(start, min(start + chunk, 1 << n), dtype=np.int64)
        yield ((codes[:, None] >> shifts) & 1).astype(np.int8)


def _score_rows(p: PairwisePotentials, unary: np.ndarray, bits: np.ndarray) -> np.ndarray:
    b = bits.astype(np.float64)
    out = unary[:, 0].sum() + b @ (unary[:, 1] - unary[:, 0])
    for (i, j), alpha in p.edges.items():
        out += alpha * b[:, i] * b[:, j]
    return out


def _check_capacity(n: int) -> None:
    if n > MAX_ENUMERATION_BITS:
        raise CapacityError(
            f"exhaustive enumeration limited to n <= {MAX_ENUMERATION_BITS}, got n={n}"
        )


def brute_force_map(p: PairwisePotentials, gumbel: Optional[GumbelDraw] = None) -> Assignment:
    """Exhaustive MAP; ties go to the lexicographically smallest bit vector."""
    _check_capacity(p.n)
    unary = _perturbed_unary(p, gumbel)
    best_score, best = -np.inf, None
    for bits in _assignment_chunks(p.n):
        scores = _score_rows(p, unary, bits)
        i = int(np.argmax(scores))
        if scores[i] > best_score:
            best_score, best = scores[i], bits[i]
    return best.astype(np.int64)


def maxflow_map(p: PairwisePotentials, gumbel: Optional[GumbelDraw] = None) -> Assignment:
    """
    Exact MAP for non-negative couplings via s-t min-cut.

    Energy E = -score. A coupling -alpha z_i z_j is rewritten as
    -alpha z_j + alpha (1 - z_i) z_j; the first part folds into the unary
    terms, the second becomes an i -> j edge cut when z_i = 0 and z_j = 1.
    Nodes left on the source side take z = 0.
    """
    if not p.is_supermodular:
        raise SolverPreconditionError(
            "maxflow_map needs every alpha >= 0; use brute_force_map for general couplings"
        )
    unary = _perturbed_unary(p, gumbel)
    cost0 = -unary[:, 0].copy()
    cost1 = -unary[:, 1].copy()

    graph = nx.DiGraph()
    graph.add_nodes_from([_SOURCE, _SINK])
    graph.add_nodes_from(range(p.n))
    for (i, j), alpha in p.edges.items():
        if alpha == 0:
            continue
        cost1[j] -= alpha
        graph.add_edge(i, j, capacity=alpha)

    for i in range(p.n):
        diff = cost1[i] - cost0[i]
        if diff > 0:
            graph.add_edge(_SOURCE, i, capacity=diff)
        elif diff < 0:
            graph.add_edge(i, _SINK, capacity=-diff)

    if graph.number_of_edges() == 0:
        return (unary[:, 1] > unary[:, 0]).astype(np.int64)

    residual = boykov_kolmogorov(graph, _SOURCE, _SINK)
    scale_ = max(1.0, max(d["capacity"] for _, _, d in graph.edges(data=True)))
    tol = 1e-12 * scale_
    source_side = _reachable(residual, tol)
    bits = np.array([0 if i in source_side else 1 for i in range(p.n)], dtype=np.int64)
    logger.debug("maxflow_map n=%d flow=%.6g", p.n, residual.graph.get("flow_value", np.nan))
    return bits


def _reachable(residual: nx.DiGraph, tol: float) -> set:
    seen = {_SOURCE}
    stack = [_SOURCE]
    while stack:
        u = stack.pop()
        for v, attr in residual.succ[u].items():
            if v not in seen and attr["capacity"] - attr["flow"] > tol:
                seen.add(v)
                stack.append(v)
    return seen


def structured_map(p: PairwisePotentials, gumbel: Optional[GumbelDraw] = None) -> Assignment:
    """Dispatch to max-flow when the couplings allow it, else enumerate."""
    if p.is_supermodular:
        return maxflow_map(p, gumbel)
    return brute_force_map(p, gumbel)


def exact_log_partition(p: PairwisePotentials) -> float:
    _check_capacity(p.n)
    parts = [logsumexp(_score_rows(p, p.unary, bits)) for bits in _assignment_chunks(p.n)]
    return float(logsumexp(parts))


def all_assignments(n: int) -> np.ndarray:
    _check_capacity(n)
    return np.concatenate(list(_assignment_chunks(n)))


def assignment_scores(p: PairwisePotentials) -> np.ndarray:
    """Unperturbed score of every assignment, in all_assignments order."""
    _check_capacity(p.n)
    return np.concatenate([_score_rows(p, p.unary, bits) for bits in _assignment_chunks(p.n)])


def edge_list(n: int):
    """Every pair i < j in row-major order; the layout of a full coupling head."""
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def two_hot(bits) -> np.ndarray:
    """Decoder input for bit vectors: [1 - z_0, z_0, 1 - z_1, z_1, ...]."""
    b = np.asarray(bits, dtype=np.float64)
    out = np.empty(b.shape[:-1] + (2 * b.shape[-1],))
    out[..., 0::2] = 1.0 - b
    out[..., 1::2] = b
    return out


def decoder_lowdim_approx(decoder: MlpParams, x, z_star) -> np.ndarray:
    """
    f_tilde[i, b] = f(x, z* with coordinate i set to b), f being the Bernoulli
    log-likelihood. One decoder pass over z* and its n single flips.
    """
    z = np.asarray(z_star, dtype=np.int64)
    if z.ndim != 1 or np.any((z != 0) & (z != 1)):
        raise ContractError("z_star must be a 1-D bit vector")
    n = z.size
    flips = np.repeat(z[None, :], n + 1, axis=0)
    flips[np.arange(1, n + 1), np.arange(n)] ^= 1
    logits = mlp_values(decoder, two_hot(flips))
    target = np.asarray(x, dtype=np.float64).reshape(1, -1)
    f = -bce_rows(logits, target)

    f_tilde = np.empty((n, 2))
    f_tilde[np.arange(n), z] = f[0]
    f_tilde[np.arange(n), 1 - z] = f[1:]
    return f_tilde


def structured_perturbed_argmax(
    p: PairwisePotentials,
    f_tilde: np.ndarray,
    eps: float,
    gumbel: Optional[GumbelDraw] = None,
) -> Assignment:
    if eps < 0:
        raise ContractError(f"eps must be non-negative, got {eps}")
    shifted = p.with_unary(p.unary + eps * np.asarray(f_tilde, dtype=np.float64))
    return structured_map(shifted, gumbel)
