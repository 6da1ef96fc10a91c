"""Binary file formats: embedding matrices and model checkpoints.

All formats are little-endian with a 4-byte magic. Floats are stored as
float32 and widened to float64 in memory. Corrupt magic or truncated
payloads raise FormatError with the failing byte offset.

    EVE1  embedding matrix, optional per-row UTF-8 id table
    EVF1  float encoder checkpoint
    EVQ1  quantized encoder checkpoint (int8 weights, per-channel scales,
          float32 biases, static activation scales when present)
"""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import Tensor
from .encoder import ACTIVATIONS, DenseEncoder, Layer
from .errors import ContractError, FormatError
from .quant import (QuantCalibration, QuantParams, QuantScheme,
                    QuantizedEncoder, quantize)

EMBEDDING_MAGIC = b"EVE1"
FLOAT_MAGIC = b"EVF1"
QUANT_MAGIC = b"EVQ1"


class _Reader:
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.data):
            raise FormatError("truncated payload", offset=self.offset)
        out = struct.unpack_from(fmt, self.data, self.offset)
        self.offset += size
        return out

    def take_array(self, dtype, count):
        size = np.dtype(dtype).itemsize * count
        if self.offset + size > len(self.data):
            raise FormatError("truncated payload", offset=self.offset)
        out = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.offset)
        self.offset += size
        return out

    def expect_magic(self, magic):
        (got,) = self.take(f"<{len(magic)}s")
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}", offset=0)

    def done(self):
        if self.offset != len(self.data):
            raise FormatError("trailing bytes after payload", offset=self.offset)


def _f32le(array):
    return np.ascontiguousarray(array, dtype="<f4")


# -- EVE1 embedding matrices -------------------------------------------------


def write_embeddings(path, matrix, ids=None):
    matrix = np.atleast_2d(np.asarray(matrix))
    n, d = matrix.shape
    if n == 0 or d == 0:
        raise ContractError("embedding matrix must be non-empty")
    if ids is not None and len(ids) != n:
        raise ContractError(f"{len(ids)} ids for {n} rows")
    parts = [EMBEDDING_MAGIC, struct.pack("<IIB", n, d, 1 if ids is not None else 0)]
    parts.append(_f32le(matrix).tobytes())
    if ids is not None:
        for name in ids:
            raw = name.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)) + raw)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_embeddings(path):
    """Returns (matrix float64, ids or None)."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    r.expect_magic(EMBEDDING_MAGIC)
    n, d, has_ids = r.take("<IIB")
    matrix = r.take_array("<f4", n * d).reshape(n, d).astype(np.float64)
    ids = None
    if has_ids:
        ids = []
        for _ in range(n):
            (length,) = r.take("<H")
            raw = r.take_array(np.uint8, length)
            ids.append(bytes(raw).decode("utf-8"))
    r.done()
    return matrix, ids


# -- EVF1 float checkpoints --------------------------------------------------


def save_float_checkpoint(path, encoder: DenseEncoder):
    parts = [FLOAT_MAGIC, struct.pack("<I", len(encoder.layers))]
    for layer in encoder.layers:
        parts.append(struct.pack("<IIB", layer.out_dim, layer.in_dim,
                                 ACTIVATIONS.index(layer.activation)))
        parts.append(_f32le(layer.weight.data).tobytes())
        parts.append(_f32le(layer.bias.data).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_float_checkpoint(path) -> DenseEncoder:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    r.expect_magic(FLOAT_MAGIC)
    (n_layers,) = r.take("<I")
    layers = []
    for _ in range(n_layers):
        out_dim, in_dim, act = r.take("<IIB")
        if act >= len(ACTIVATIONS):
            raise FormatError(f"unknown activation tag {act}", offset=r.offset)
        w = r.take_array("<f4", out_dim * in_dim).reshape(out_dim, in_dim)
        b = r.take_array("<f4", out_dim)
        layers.append(Layer(Tensor(w.astype(np.float64)),
                            Tensor(b.astype(np.float64)), ACTIVATIONS[act]))
    r.done()
    return DenseEncoder(layers)


# -- EVQ1 quantized checkpoints ----------------------------------------------

_MODES = ("static", "dynamic")


def save_quantized_checkpoint(path, encoder: DenseEncoder, calibration: QuantCalibration):
    scheme = calibration.scheme
    if scheme.bits > 8:
        raise ContractError("quantized checkpoints support at most 8 bits")
    calibration.refit_weights(encoder)
    static = scheme.mode == "static"
    parts = [QUANT_MAGIC,
             struct.pack("<BBBB", scheme.bits, 1, 0, _MODES.index(scheme.mode)),
             struct.pack("<I", len(encoder.layers))]
    for layer, wp, ap in zip(
        encoder.layers, calibration.weight_params,
        calibration.activation_params if static else [None] * len(encoder.layers),
    ):
        parts.append(struct.pack("<IIB", layer.out_dim, layer.in_dim,
                                 ACTIVATIONS.index(layer.activation)))
        parts.append(quantize(layer.weight.data, wp).astype("<i1").tobytes())
        parts.append(_f32le(wp.scale).tobytes())
        parts.append(_f32le(layer.bias.data).tobytes())
        if static:
            parts.append(struct.pack("<f", float(ap.scale)))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_quantized_checkpoint(path) -> QuantizedEncoder:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    r.expect_magic(QUANT_MAGIC)
    bits, w_gran, a_gran, mode = r.take("<BBBB")
    if w_gran != 1 or a_gran != 0:
        raise FormatError("unsupported granularity tags", offset=4)
    if mode >= len(_MODES):
        raise FormatError(f"unknown quantization mode tag {mode}", offset=4)
    scheme = QuantScheme(bits=bits, mode=_MODES[mode])
    (n_layers,) = r.take("<I")
    qmax = 2 ** (bits - 1) - 1
    layers, weight_params, act_params = [], [], []
    for _ in range(n_layers):
        out_dim, in_dim, act = r.take("<IIB")
        if act >= len(ACTIVATIONS):
            raise FormatError(f"unknown activation tag {act}", offset=r.offset)
        q = r.take_array("<i1", out_dim * in_dim).reshape(out_dim, in_dim)
        scales = r.take_array("<f4", out_dim).astype(np.float64)
        bias = r.take_array("<f4", out_dim).astype(np.float64)
        w = q.astype(np.float64) / scales[:, None]
        layers.append(Layer(Tensor(w), Tensor(bias), ACTIVATIONS[act]))
        weight_params.append(QuantParams(alpha=qmax / scales, scale=scales,
                                         bits=bits, axis=0))
        if scheme.mode == "static":
            (s,) = r.take("<f")
            act_params.append(QuantParams(alpha=np.asarray(qmax / s),
                                          scale=np.asarray(float(s)), bits=bits))
    r.done()
    calibration = QuantCalibration(
        scheme, weight_params,
        act_params if scheme.mode == "static" else None,
        refit=False,
    )
    return QuantizedEncoder(DenseEncoder(layers), calibration)


def write_angle_histogram_csv(path, stats):
    """Angle histogram as (bin_start_deg, count) rows for external plotting."""
    lines = ["bin_start_deg,count"]
    for start, count in zip(stats.bins(), stats.histogram):
        lines.append(f"{start:.1f},{int(count)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
