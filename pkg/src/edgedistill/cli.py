"""Command-line driver for the adaptation pipeline.

Each subcommand runs one stage inside a run directory; `pipeline` chains
all of them and prints the three-row accuracy comparison table. Exit codes:
0 success, 2 configuration errors, 3 data/format errors, 4 training
divergence or collapse, 1 anything else.
"""

from __future__ import annotations

import argparse
import sys

from . import pipeline as pl
from .config import load_config
from .errors import (CollapseError, ConfigError, ContractError, DataError,
                     DivergenceError, EdgeDistillError, FormatError)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4


def _add_common(parser):
    parser.add_argument("--config", help="config file (key = value lines)")
    parser.add_argument("--run-dir", default="run", help="run directory for artifacts")
    parser.add_argument("--force", action="store_true",
                        help="re-run even if the stage is already stamped")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--bits", type=int)
    parser.add_argument("--tau-c", type=float, dest="tau_c")
    parser.add_argument("--margin", type=float)
    parser.add_argument("--neg-set-size", type=int, dest="neg_set_size")
    parser.add_argument("--sampling", choices=["semi-hard", "hard"])
    parser.add_argument("--quant-mode", choices=["static", "dynamic"], dest="quant_mode")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="edgedistill",
        description="Two-stage dual-modality distillation with quantization-aware "
                    "contrastive learning on a synthetic benchmark.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    stages = {
        "gen": "generate the synthetic benchmark",
        "curate": "confidence-filter and pseudo-label the training pairs",
        "stage1": "train the student by dual-modality feature distillation",
        "calibrate": "fit static activation scales from a calibration subset",
        "ptq-eval": "evaluate the float student and its post-training quantization",
        "stage2": "quantization-aware contrastive fine-tuning",
        "eval": "evaluate the stage-2 model under static and dynamic quantization",
        "angles": "feature-to-text angle statistics for float/PTQ/stage-2",
        "pipeline": "run every stage and print the comparison table",
        "report": "rebuild the comparison table from stored artifacts",
    }
    for name, help_text in stages.items():
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name in ("pipeline", "stage2"):
            p.add_argument("--stage", choices=["one", "two"], default="two",
                           help="'one' skips distillation and trains stage 2 "
                                "from random initialization")
    return parser


def _resolve_config(args):
    override_keys = ("seed", "bits", "tau_c", "margin", "neg_set_size",
                     "sampling", "quant_mode")
    overrides = {k: getattr(args, k) for k in override_keys
                 if getattr(args, k, None) is not None}
    return load_config(args.config, overrides=overrides)


STAGE_COMMANDS = {
    "gen": pl.stage_gen,
    "curate": pl.stage_curate,
    "calibrate": pl.stage_calibrate,
    "ptq-eval": pl.stage_ptq_eval,
    "eval": pl.stage_eval,
    "angles": pl.stage_angles,
    "report": pl.stage_report,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        run = pl.PipelineRun(args.run_dir, cfg)
        if args.command == "pipeline":
            pl.run_pipeline(cfg, args.run_dir, force=args.force,
                            one_stage=args.stage == "one")
            with open(run.path("report.txt")) as fh:
                print(fh.read(), end="")
        elif args.command == "stage1":
            pl.stage_stage1(run, force=args.force)
        elif args.command == "stage2":
            if args.stage == "one":
                pl.stage_stage1_random(run, force=args.force)
                pl.stage_calibrate(run, force=args.force)
            pl.stage_stage2(run, force=args.force)
        elif args.command == "report":
            pl.stage_report(run, force=args.force)
            with open(run.path("report.txt")) as fh:
                print(fh.read(), end="")
        else:
            STAGE_COMMANDS[args.command](run, force=args.force)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, CollapseError) as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ContractError, EdgeDistillError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
