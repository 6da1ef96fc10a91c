"""Dense multilayer encoder: the trainable student feature map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError

ACTIVATIONS = ("relu", "identity")


@dataclass
class Layer:
    weight: Tensor  # [out, in]
    bias: Tensor  # [out]
    activation: str

    @property
    def out_dim(self):
        return self.weight.shape[0]

    @property
    def in_dim(self):
        return self.weight.shape[1]


class DenseEncoder:
    """Stack of dense layers with relu/identity activations.

    The final layer is always identity so embeddings stay unbounded before
    any normalization. Forward retains the computation graph whenever a
    parameter requires gradients; `embed` is the pure-numpy inference path.
    """

    def __init__(self, layers):
        if not layers:
            raise ContractError("encoder needs at least one layer")
        for layer in layers:
            if layer.activation not in ACTIVATIONS:
                raise ContractError(f"unknown activation {layer.activation!r}")
            if layer.bias.shape != (layer.out_dim,):
                raise ShapeError(
                    f"bias shape {layer.bias.shape} does not match out dim {layer.out_dim}"
                )
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(
                    f"layer dims do not chain: out {prev.out_dim} vs in {nxt.in_dim}"
                )
        if layers[-1].activation != "identity":
            raise ContractError("final layer activation must be identity")
        self.layers = list(layers)

    @property
    def input_dim(self):
        return self.layers[0].in_dim

    @property
    def output_dim(self):
        return self.layers[-1].out_dim

    def parameters(self):
        params = []
        for layer in self.layers:
            params.append(layer.weight)
            params.append(layer.bias)
        return params

    def set_trainable(self, flag=True):
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def forward(self, batch: Tensor) -> Tensor:
        if batch.shape[-1] != self.input_dim:
            raise ShapeError(
                f"batch has {batch.shape[-1]} columns, encoder expects {self.input_dim}"
            )
        x = batch
        for layer in self.layers:
            x = x @ layer.weight.T + layer.bias
            if layer.activation == "relu":
                x = ad.relu(x)
        return x

    def embed(self, x: np.ndarray) -> np.ndarray:
        """Graph-free forward pass; pure, safe to call concurrently."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            raise ShapeError(
                f"batch has {x.shape[-1]} columns, encoder expects {self.input_dim}"
            )
        for layer in self.layers:
            x = x @ layer.weight.data.T + layer.bias.data
            if layer.activation == "relu":
                x = np.maximum(x, 0.0)
        return x

    def layer_inputs(self, x: np.ndarray):
        """Per-layer pre-matmul activations (layer 0 sees the raw input)."""
        x = np.asarray(x, dtype=np.float64)
        inputs = []
        for layer in self.layers:
            inputs.append(x)
            x = x @ layer.weight.data.T + layer.bias.data
            if layer.activation == "relu":
                x = np.maximum(x, 0.0)
        return inputs

    def copy(self):
        layers = [
            Layer(
                Tensor(l.weight.data.copy(), requires_grad=l.weight.requires_grad),
                Tensor(l.bias.data.copy(), requires_grad=l.bias.requires_grad),
                l.activation,
            )
            for l in self.layers
        ]
        return DenseEncoder(layers)


def init_encoder(input_dim, hidden_dims, output_dim, rng) -> DenseEncoder:
    """Glorot-uniform initialized relu stack with identity output layer."""
    dims = [input_dim, *hidden_dims, output_dim]
    layers = []
    for i, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
        bound = np.sqrt(6.0 / (d_in + d_out))
        w = rng.uniform(-bound, bound, size=(d_out, d_in))
        b = np.zeros(d_out)
        act = "identity" if i == len(dims) - 2 else "relu"
        layers.append(Layer(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True), act))
    return DenseEncoder(layers)
