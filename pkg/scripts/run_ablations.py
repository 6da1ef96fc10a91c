#!/usr/bin/env python3
"""Reproduce the directional ablation results on the synthetic benchmark.

Runs the headline pipeline plus its variants across seeds and prints one
table per comparison:

  recovery   float vs post-training quantization vs stage-2 accuracy
  angles     mean feature-to-text angle for float / PTQ / stage-2
  modality   dual-modality stage-1 vs each single-modality variant
  sampling   semi-hard vs hard negative mining in stage 2
  stages     two-stage pipeline vs contrastive training from random init
  curation   confidence-threshold sweep on the distractor-heavy benchmark

Results are deterministic per (config, seed); re-runs reuse artifacts in
the output directory.
"""

import argparse
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from edgedistill import formats, pipeline as pl  # noqa: E402
from edgedistill.config import load_config  # noqa: E402
from edgedistill.evaluation import evaluate  # noqa: E402

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "configs")


def run_seeds(cfg, out_dir, tag, seeds, one_stage=False):
    summaries = []
    for seed in seeds:
        run_dir = os.path.join(out_dir, f"{tag}_s{seed}")
        summaries.append(pl.run_pipeline(cfg.replace(seed=seed), run_dir,
                                         one_stage=one_stage))
    return summaries


def mean(summaries, key):
    return float(np.mean([s[key] for s in summaries]))


def stage1_only_accuracy(cfg, out_dir, tag, seeds):
    accs = []
    for seed in seeds:
        run = pl.PipelineRun(os.path.join(out_dir, f"{tag}_s{seed}"),
                             cfg.replace(seed=seed))
        pl.stage_gen(run)
        pl.stage_curate(run)
        pl.stage_stage1(run)
        bench = run.benchmark()
        enc = formats.load_float_checkpoint(run.path("stage1.evf"))
        accs.append(evaluate(enc, bench.test_samples(),
                             bench.class_set()).to_dict()["acc_avg"])
    return float(np.mean(accs))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", default="ablation-runs")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--config",
                        default=os.path.join(CONFIG_DIR, "desk-benchmark.cfg"))
    parser.add_argument("--curation-config",
                        default=os.path.join(CONFIG_DIR, "distractor-heavy.cfg"))
    parser.add_argument("--skip-curation", action="store_true",
                        help="skip the (slowest) threshold sweep")
    args = parser.parse_args(argv)

    cfg = load_config(args.config)
    seeds = args.seeds

    base = run_seeds(cfg, args.out_dir, "base", seeds)
    fl, pq, s2 = (mean(base, k) for k in ("acc_float", "acc_ptq", "acc_stage2"))
    rec = (s2 - pq) / (fl - pq) if fl > pq else float("nan")
    print(f"\n== recovery ({cfg.bits}-bit, {len(seeds)} seeds)")
    print(f"  float      {fl:.4f}")
    print(f"  +PTQ       {pq:.4f}")
    print(f"  +stage-2   {s2:.4f}   ({rec:.0%} of the gap recovered)")

    print("\n== mean feature-to-text angle (deg)")
    for cond in ("float", "ptq", "stage2"):
        print(f"  {cond:<9}{np.mean([s['angles'][cond] for s in base]):8.1f}")

    print("\n== modality ablation (stage-1 float accuracy)")
    print(f"  both      {fl:.4f}")
    for mod in ("rgb", "nonrgb"):
        acc = stage1_only_accuracy(cfg.replace(modalities=mod), args.out_dir,
                                   f"mod_{mod}", seeds)
        print(f"  {mod:<9} {acc:.4f}")

    hard = run_seeds(cfg.replace(sampling="hard"), args.out_dir, "hard", seeds)
    print("\n== negative sampling (stage-2 accuracy)")
    print(f"  semi-hard {s2:.4f}")
    print(f"  hard      {mean(hard, 'acc_stage2'):.4f}")

    one = run_seeds(cfg, args.out_dir, "onestage", seeds, one_stage=True)
    print("\n== pipeline depth (final accuracy)")
    print(f"  two-stage {s2:.4f}")
    print(f"  one-stage {mean(one, 'acc_stage2'):.4f}")

    if not args.skip_curation:
        ccfg = load_config(args.curation_config)
        print("\n== curation threshold sweep (final accuracy, distractor-heavy)")
        for tau in (0.05, 0.8, 0.98):
            runs = run_seeds(ccfg.replace(tau_c=tau), args.out_dir,
                             f"tau{tau}", seeds)
            print(f"  tau_c={tau:<5} {mean(runs, 'acc_stage2'):.4f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
