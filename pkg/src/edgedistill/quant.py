"""Uniform symmetric integer quantization and fake-quantized encoders.

Scale fitting uses the plain maximum magnitude: s = (2^(b-1) - 1) / alpha.
Quantization rounds half away from zero and clips to the symmetric range
[-(2^(b-1) - 1), 2^(b-1) - 1]. Weights get one scale per output channel,
activations one scale per tensor. Fake quantization composes quantize and
dequantize inside float64 and backpropagates with the straight-through
estimator: identity inside [-alpha, alpha], zero outside.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import DenseEncoder
from .errors import ContractError

FLOAT_HEADER_BYTES = 8  # magic + layer count
QUANT_HEADER_BYTES = 12  # magic + bits/granularity/mode tags + layer count
LAYER_HEADER_BYTES = 9  # out, in dims + activation tag


@dataclass(frozen=True)
class QuantScheme:
    bits: int = 8
    mode: str = "static"  # static | dynamic

    def __post_init__(self):
        if self.bits < 2:
            raise ContractError(f"bit-width must be >= 2, got {self.bits}")
        if self.mode not in ("static", "dynamic"):
            raise ContractError(f"unknown quantization mode {self.mode!r}")

    @property
    def qmax(self):
        return 2 ** (self.bits - 1) - 1


@dataclass(frozen=True)
class QuantParams:
    alpha: np.ndarray  # scalar array (per-tensor) or 1-d (per-channel)
    scale: np.ndarray
    bits: int
    axis: int | None = None  # channel axis, None for per-tensor


def clip(x, a, b):
    if np.any(np.asarray(a) > np.asarray(b)):
        raise ContractError(f"clip bounds out of order: {a} > {b}")
    return np.clip(x, a, b)


def round_half_away(x):
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def fit_scale(values, bits, axis=None) -> QuantParams:
    """Fit clipping magnitude alpha = max |value| and scale s = qmax / alpha.

    With `axis` set, alpha is fitted per channel along that axis. All-zero
    channels fall back to alpha = 1 (quantized zeros are exact regardless).
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ContractError("cannot fit a scale to an empty tensor")
    qmax = 2 ** (bits - 1) - 1
    if axis is None:
        alpha = np.asarray(np.max(np.abs(values)))
    else:
        reduce_axes = tuple(i for i in range(values.ndim) if i != axis)
        alpha = np.max(np.abs(values), axis=reduce_axes)
    zero = alpha == 0.0
    if np.any(zero):
        warnings.warn("all-zero channel during scale fitting; alpha set to 1.0")
        alpha = np.where(zero, 1.0, alpha)
    return QuantParams(alpha=alpha, scale=qmax / alpha, bits=bits, axis=axis)


def _broadcast(param_vec, ndim, axis):
    if axis is None:
        return param_vec
    shape = [1] * ndim
    shape[axis] = -1
    return param_vec.reshape(shape)


def quantize(x, params: QuantParams):
    x = np.asarray(x, dtype=np.float64)
    qmax = 2 ** (params.bits - 1) - 1
    s = _broadcast(params.scale, x.ndim, params.axis)
    return clip(round_half_away(x * s), -qmax, qmax).astype(np.int32)


def dequantize(x_q, params: QuantParams):
    x_q = np.asarray(x_q)
    s = _broadcast(params.scale, x_q.ndim, params.axis)
    return x_q.astype(np.float64) / s


def fake_quantize_array(x, params: QuantParams):
    return dequantize(quantize(x, params), params)


def fake_quant(t: Tensor, params: QuantParams) -> Tensor:
    """Differentiable quantize-then-dequantize with STE gradients."""
    out = fake_quantize_array(t.data, params)
    alpha = _broadcast(np.asarray(params.alpha, dtype=np.float64), t.data.ndim, params.axis)
    mask = np.abs(t.data) <= alpha
    return Tensor(out, _parents=(t,), _backward_fn=lambda g: (g * mask,))


@dataclass
class QuantCalibration:
    """Fitted quantization parameters for every layer of an encoder."""

    scheme: QuantScheme
    weight_params: list  # per-channel QuantParams per layer
    activation_params: list | None  # per-tensor QuantParams per layer, static only
    refit: bool = True  # refit weight scales from live weights each pass

    def refit_weights(self, encoder: DenseEncoder):
        if not self.refit:
            return
        self.weight_params = [
            fit_scale(layer.weight.data, self.scheme.bits, axis=0)
            for layer in encoder.layers
        ]


def calibrate_static(encoder: DenseEncoder, calibration_pairs, scheme: QuantScheme) -> QuantCalibration:
    """Fit static activation scales from a small set of paired samples.

    Both modalities of every pair pass through the float encoder; the
    per-layer input maxima over all of them become the per-tensor activation
    clipping magnitudes. Weight scales come straight from the weights.
    """
    if len(calibration_pairs) == 0:
        raise ContractError("calibration set is empty")
    n_layers = len(encoder.layers)
    maxima = np.zeros(n_layers)
    for sample in calibration_pairs:
        for x in (sample.rgb, sample.nonrgb):
            for i, layer_in in enumerate(encoder.layer_inputs(x[None, :])):
                maxima[i] = max(maxima[i], np.max(np.abs(layer_in)))
    act_params = [fit_scale(np.asarray([m]), scheme.bits) for m in maxima]
    weight_params = [
        fit_scale(layer.weight.data, scheme.bits, axis=0) for layer in encoder.layers
    ]
    return QuantCalibration(scheme, weight_params, act_params)


class FakeQuantEncoder:
    """Encoder view whose forward pass runs through fake quantization.

    Weight scales are refitted from the current weights on every pass so
    training through the wrapper always quantizes against the live weights.
    Static mode uses calibrated activation scales; dynamic mode fits the
    activation scale from each incoming batch.
    """

    def __init__(self, encoder: DenseEncoder, calibration: QuantCalibration):
        scheme = calibration.scheme
        if scheme.mode == "static":
            if calibration.activation_params is None or len(
                calibration.activation_params
            ) != len(encoder.layers):
                raise ContractError("static mode requires activation params for every layer")
        if len(calibration.weight_params) != len(encoder.layers):
            raise ContractError("calibration does not cover every layer")
        self.encoder = encoder
        self.scheme = scheme
        self.calibration = calibration

    @property
    def input_dim(self):
        return self.encoder.input_dim

    @property
    def output_dim(self):
        return self.encoder.output_dim

    def parameters(self):
        return self.encoder.parameters()

    def _act_params(self, i, x_data):
        if self.scheme.mode == "static":
            return self.calibration.activation_params[i]
        return fit_scale(x_data, self.scheme.bits)

    def forward(self, batch: Tensor) -> Tensor:
        self.calibration.refit_weights(self.encoder)
        x = batch
        for i, layer in enumerate(self.encoder.layers):
            xq = fake_quant(x, self._act_params(i, x.data))
            wq = fake_quant(layer.weight, self.calibration.weight_params[i])
            x = xq @ wq.T + layer.bias
            if layer.activation == "relu":
                x = ad.relu(x)
        return x

    def embed(self, x: np.ndarray) -> np.ndarray:
        self.calibration.refit_weights(self.encoder)
        x = np.asarray(x, dtype=np.float64)
        for i, layer in enumerate(self.encoder.layers):
            xq = fake_quantize_array(x, self._act_params(i, x))
            wq = fake_quantize_array(layer.weight.data, self.calibration.weight_params[i])
            x = xq @ wq.T + layer.bias.data
            if layer.activation == "relu":
                x = np.maximum(x, 0.0)
        return x


class QuantizedEncoder(FakeQuantEncoder):
    """Frozen post-training-quantized encoder (inference only)."""

    def __init__(self, encoder, calibration):
        super().__init__(encoder.copy(), calibration)
        self.encoder.set_trainable(False)


def ptq(encoder: DenseEncoder, calibration: QuantCalibration) -> QuantizedEncoder:
    """Quantize a trained encoder with no retraining."""
    return QuantizedEncoder(encoder, calibration)


def model_size(encoder: DenseEncoder, scheme: QuantScheme | None = None) -> int:
    """Serialized parameter bytes: float32 baseline or low-bit with scales.

    Quantized layout stores 1-byte integer weights (b <= 8), float32
    biases, one float32 scale per output channel, plus one float32
    activation scale per layer in static mode.
    """
    n_weights = sum(l.weight.data.size for l in encoder.layers)
    n_biases = sum(l.bias.data.size for l in encoder.layers)
    per_layer = LAYER_HEADER_BYTES * len(encoder.layers)
    if scheme is None:
        return FLOAT_HEADER_BYTES + per_layer + 4 * (n_weights + n_biases)
    if scheme.bits > 8:
        raise ContractError("quantized storage supports at most 8 bits")
    n_channels = sum(l.weight.data.shape[0] for l in encoder.layers)
    size = QUANT_HEADER_BYTES + per_layer + n_weights + 4 * n_biases + 4 * n_channels
    if scheme.mode == "static":
        size += 4 * len(encoder.layers)
    return size
