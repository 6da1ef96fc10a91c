#!/usr/bin/env python3
"""Regenerate the committed reference files under tests/golden/.

The files pin the on-disk byte layouts: hand-picked dyadic values encode
exactly in float32, so any byte drift signals a format change rather than
rounding. Run with --check to verify the committed bytes instead of
rewriting them.
"""

import argparse
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from edgedistill import formats  # noqa: E402
from edgedistill.autodiff import Tensor  # noqa: E402
from edgedistill.dataset import PairedSample  # noqa: E402
from edgedistill.encoder import DenseEncoder, Layer  # noqa: E402
from edgedistill.quant import QuantScheme, calibrate_static  # noqa: E402

GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "..", "tests", "golden")


def reference_encoder() -> DenseEncoder:
    w1 = np.array([[0.5, -0.25], [1.0, 0.125], [-0.75, 0.375]])
    b1 = np.array([0.0, 0.5, -0.5])
    w2 = np.array([[1.5, -0.5, 0.25], [0.0, 2.0, -1.0]])
    b2 = np.array([0.125, -0.125])
    return DenseEncoder([Layer(Tensor(w1), Tensor(b1), "relu"),
                         Layer(Tensor(w2), Tensor(b2), "identity")])


def build(target_dir):
    os.makedirs(target_dir, exist_ok=True)
    out = {}

    matrix = (np.arange(12) / 8.0).reshape(3, 4)
    out["reference.eve"] = lambda path: formats.write_embeddings(
        path, matrix, ids=["alpha", "beta", "gamma"])

    enc = reference_encoder()
    out["reference.evf"] = lambda path: formats.save_float_checkpoint(path, enc)

    rng = np.random.default_rng(42)
    pairs = [PairedSample(rng.standard_normal(2), rng.standard_normal(2))
             for _ in range(4)]
    cal = calibrate_static(enc, pairs, QuantScheme(bits=8, mode="static"))
    out["reference.evq"] = lambda path: formats.save_quantized_checkpoint(
        path, enc, cal)
    return out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--check", action="store_true",
                        help="verify committed bytes without rewriting")
    args = parser.parse_args(argv)

    writers = build(GOLDEN_DIR)
    status = 0
    for name, write in writers.items():
        final = os.path.join(GOLDEN_DIR, name)
        if args.check:
            tmp = final + ".check"
            write(tmp)
            same = (os.path.exists(final)
                    and open(tmp, "rb").read() == open(final, "rb").read())
            os.remove(tmp)
            print(f"{name}: {'ok' if same else 'MISMATCH'}")
            status |= 0 if same else 1
        else:
            write(final)
            print(f"wrote {final} ({os.path.getsize(final)} bytes)")
    return status


if __name__ == "__main__":
    raise SystemExit(main())
