#!/usr/bin/env python3
"""Report serialized model sizes for the student across bit-widths.

Sizes come from the byte-exact checkpoint layouts, so the float32 / int8
ratio printed here matches actual files on disk.
"""

import argparse
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from edgedistill.config import load_config  # noqa: E402
from edgedistill.encoder import init_encoder  # noqa: E402
from edgedistill.quant import QuantScheme, model_size  # noqa: E402


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=None,
                        help="config file for the student dimensions")
    args = parser.parse_args(argv)

    cfg = load_config(args.config)
    rng = np.random.default_rng(cfg.seed)
    enc = init_encoder(cfg.input_dim, cfg.hidden_dims, cfg.feature_dim, rng)

    float_bytes = model_size(enc)
    arch = f"{cfg.input_dim} -> {' -> '.join(map(str, cfg.hidden_dims))} -> {cfg.feature_dim}"
    print(f"student {arch}")
    print(f"  float32            {float_bytes:>10,} B")
    # narrower widths still serialize one byte per value, so only the
    # 8-bit rows say anything about on-disk size
    for mode in ("static", "dynamic"):
        b = model_size(enc, QuantScheme(bits=8, mode=mode))
        print(f"  int8 {mode:<8}      {b:>10,} B   ({float_bytes / b:.2f}x smaller)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
