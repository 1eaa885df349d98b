# tests/conftest.py

import numpy as np
import pytest

from src.tensor_autodiff import init_mlp


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_nets():
    """Linear 6 -> 4 encoder and 4 -> 6 decoder (58 parameters) plus one binary image."""
    gen = np.random.default_rng(7)
    encoder = init_mlp("encoder", [6, 4], ["identity"], gen)
    decoder = init_mlp("decoder", [4, 6], ["identity"], gen)
    decoder.weights[0] *= 3.0
    x = np.array([1.0, 0.0, 1.0, 1.0, 0.0, 0.0])
    return encoder, decoder, x


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


@pytest.fixture
def cosine():
    return _cosine
