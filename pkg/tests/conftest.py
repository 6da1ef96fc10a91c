"""Shared fixtures and helpers for the test suite."""

import numpy as np
import pytest

from edgedistill.autodiff import Tensor
from edgedistill.encoder import DenseEncoder, Layer, init_encoder


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_encoder(input_dim=6, hidden=(8,), output_dim=5, seed=7, trainable=False):
    enc = init_encoder(input_dim, hidden, output_dim, np.random.default_rng(seed))
    enc.set_trainable(trainable)
    return enc


def make_linear_encoder(weight, bias=None, trainable=False):
    """Single identity-activation layer from explicit numpy arrays."""
    weight = np.asarray(weight, dtype=np.float64)
    if bias is None:
        bias = np.zeros(weight.shape[0])
    layer = Layer(Tensor(weight, requires_grad=trainable),
                  Tensor(np.asarray(bias, dtype=np.float64), requires_grad=trainable),
                  "identity")
    return DenseEncoder([layer])


def unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)
