"""Run-directory orchestration of the two-stage adaptation pipeline.

Every stage writes its artifacts into one run directory and stamps them
with the hash of the resolved configuration. Re-running a completed stage
under the same hash is a no-op unless forced, so artifact bytes are stable
across repeated invocations.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import formats
from .config import Config, canonical_text, config_hash
from .curation import curate
from .dataset import CuratedDataset
from .distill import Stage1Config, stage1_train
from .encoder import init_encoder
from .errors import ContractError
from .evaluation import angle_stats, evaluate
from .qacl import Stage2Config, stage2_train
from .quant import QuantCalibration, QuantScheme, calibrate_static, ptq
from .synth import generate_benchmark, load_benchmark, save_benchmark

EVAL_CONDITIONS = ("float", "ptq_static", "ptq_dynamic", "stage2_static", "stage2_dynamic")


@dataclass
class PipelineRun:
    run_dir: str
    cfg: Config

    def __post_init__(self):
        os.makedirs(self.run_dir, exist_ok=True)
        self.hash = config_hash(self.cfg)

    def path(self, name):
        return os.path.join(self.run_dir, name)

    # -- stamping ------------------------------------------------------------

    def _stamp_path(self, stage):
        return self.path(f"{stage}.stamp")

    def is_done(self, stage):
        try:
            with open(self._stamp_path(stage)) as fh:
                return fh.read().strip() == self.hash
        except FileNotFoundError:
            return False

    def mark_done(self, stage):
        with open(self._stamp_path(stage), "w") as fh:
            fh.write(self.hash + "\n")

    def write_json(self, name, payload):
        payload = dict(payload)
        payload["config_hash"] = self.hash
        with open(self.path(name), "w") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)
            fh.write("\n")

    def read_json(self, name):
        with open(self.path(name)) as fh:
            return json.load(fh)

    def require(self, stage):
        if not self.is_done(stage):
            raise ContractError(
                f"stage '{stage}' has not been run for this config; "
                f"run it first (run dir: {self.run_dir})"
            )

    # -- shared loads --------------------------------------------------------

    def benchmark(self):
        self.require("gen")
        return load_benchmark(self.path("benchmark"))

    def curated(self, bench=None):
        self.require("curate")
        bench = bench or self.benchmark()
        record = self.read_json("curated.json")
        kept = np.asarray(record["kept_train_positions"], dtype=np.intp)
        samples = [bench.train_samples()[i] for i in kept]
        data = CuratedDataset(
            samples=samples,
            confidences=np.asarray(record["confidences"]),
            pseudo_labels=np.asarray(record["pseudo_labels"], dtype=np.intp),
            tau_c=record["tau_c"],
        )
        teacher = bench.train_teacher_features()[kept]
        return data, teacher

    def scheme(self):
        return QuantScheme(bits=self.cfg.bits, mode=self.cfg.quant_mode)

    def calibration_for(self, encoder, act_scales=None):
        scheme = self.scheme()
        if scheme.mode == "dynamic":
            cal = QuantCalibration(scheme, [], None)
            cal.refit_weights(encoder)
            return cal
        if act_scales is None:
            act_scales = self.read_json("calibration.json")["activation_scales"]
        from .quant import QuantParams, fit_scale

        qmax = scheme.qmax
        act_params = [
            QuantParams(alpha=np.asarray(qmax / s), scale=np.asarray(float(s)),
                        bits=scheme.bits)
            for s in act_scales
        ]
        cal = QuantCalibration(scheme, [], act_params)
        cal.refit_weights(encoder)
        return cal


# -- stages ------------------------------------------------------------------


def stage_gen(run: PipelineRun, force=False):
    if run.is_done("gen") and not force:
        return
    cfg = run.cfg
    bench = generate_benchmark(
        seed=cfg.seed, n_classes=cfg.n_classes, n_distractors=cfg.n_distractors,
        feature_dim=cfg.feature_dim, input_dim=cfg.input_dim,
        samples_per_class=cfg.samples_per_class, sigma=cfg.noise_sigma,
        test_fraction=cfg.test_fraction,
    )
    save_benchmark(run.path("benchmark"), bench)
    with open(run.path("config.snapshot"), "w") as fh:
        fh.write(canonical_text(run.cfg))
    run.mark_done("gen")


def stage_curate(run: PipelineRun, force=False):
    if run.is_done("curate") and not force:
        return
    bench = run.benchmark()
    train = bench.train_samples()
    teacher = bench.train_teacher_features()
    data = curate(train, teacher, bench.superset(), run.cfg.tau_c, run.cfg.temperature)
    id_of = {id(s): i for i, s in enumerate(train)}
    kept = [id_of[id(s)] for s in data.samples]
    run.write_json("curated.json", {
        "kept_train_positions": kept,
        "confidences": data.confidences.tolist(),
        "pseudo_labels": data.pseudo_labels.tolist(),
        "tau_c": data.tau_c,
        "raw_count": len(train),
        "kept_count": len(kept),
    })
    run.mark_done("curate")


def stage_stage1(run: PipelineRun, force=False):
    if run.is_done("stage1") and not force:
        return
    cfg = run.cfg
    bench = run.benchmark()
    data, teacher = run.curated(bench)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 10]))
    student = init_encoder(bench.input_dim, cfg.hidden_dims, bench.feature_dim, rng)
    trace = stage1_train(student, data, teacher, Stage1Config(
        base_lr=cfg.stage1_lr, min_lr=cfg.stage1_min_lr,
        weight_decay=cfg.stage1_weight_decay, epochs=cfg.stage1_epochs,
        batch_size=cfg.batch_size, modalities=cfg.modalities, seed=cfg.seed,
    ))
    formats.save_float_checkpoint(run.path("stage1.evf"), student)
    run.write_json("stage1_trace.json", {"epoch_loss": trace})
    run.mark_done("stage1")


def _calibration_subset(run: PipelineRun, bench, data):
    cfg = run.cfg
    pool = data.samples if cfg.calibrate_from == "curated" else bench.train_samples()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    take = min(cfg.calibration_pairs, len(pool))
    idx = rng.choice(len(pool), size=take, replace=False)
    return [pool[i] for i in idx]


def stage_calibrate(run: PipelineRun, force=False):
    if run.is_done("calibrate") and not force:
        return
    run.require("stage1")
    bench = run.benchmark()
    data, _ = run.curated(bench)
    encoder = formats.load_float_checkpoint(run.path("stage1.evf"))
    scheme = QuantScheme(bits=run.cfg.bits, mode="static")
    cal = calibrate_static(encoder, _calibration_subset(run, bench, data), scheme)
    run.write_json("calibration.json", {
        "bits": scheme.bits,
        "activation_scales": [float(p.scale) for p in cal.activation_params],
        "activation_alphas": [float(p.alpha) for p in cal.activation_params],
        "calibration_pairs": len(_calibration_subset(run, bench, data)),
    })
    run.mark_done("calibrate")


def _eval_and_store(run, name, encoder, bench):
    report = evaluate(encoder, bench.test_samples(), bench.class_set())
    run.write_json(f"eval_{name}.json", report.to_dict())
    return report


def _quantized_view(run, encoder, mode):
    scheme = QuantScheme(bits=run.cfg.bits, mode=mode)
    if mode == "dynamic":
        cal = QuantCalibration(scheme, [], None)
    else:
        scales = run.read_json("calibration.json")["activation_scales"]
        from .quant import QuantParams

        cal = QuantCalibration(scheme, [], [
            QuantParams(alpha=np.asarray(scheme.qmax / s),
                        scale=np.asarray(float(s)), bits=scheme.bits)
            for s in scales
        ])
    cal.refit_weights(encoder)
    return ptq(encoder, cal)


def stage_ptq_eval(run: PipelineRun, force=False):
    if run.is_done("ptq-eval") and not force:
        return
    run.require("calibrate")
    bench = run.benchmark()
    encoder = formats.load_float_checkpoint(run.path("stage1.evf"))
    _eval_and_store(run, "float", encoder, bench)
    _eval_and_store(run, "ptq_static", _quantized_view(run, encoder, "static"), bench)
    _eval_and_store(run, "ptq_dynamic", _quantized_view(run, encoder, "dynamic"), bench)
    run.mark_done("ptq-eval")


def stage_stage1_random(run: PipelineRun, force=False):
    """One-stage ablation: skip distillation, start stage 2 from random init."""
    if run.is_done("stage1") and not force:
        return
    cfg = run.cfg
    bench = run.benchmark()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 12]))
    student = init_encoder(bench.input_dim, cfg.hidden_dims, bench.feature_dim, rng)
    formats.save_float_checkpoint(run.path("stage1.evf"), student)
    run.write_json("stage1_trace.json", {"epoch_loss": [], "random_init": True})
    run.mark_done("stage1")


def stage_stage2(run: PipelineRun, force=False, audit=None):
    stage_name = "stage2"
    if run.is_done(stage_name) and not force:
        return
    cfg = run.cfg
    run.require("calibrate")
    bench = run.benchmark()
    data, _ = run.curated(bench)
    student = formats.load_float_checkpoint(run.path("stage1.evf"))

    scheme = run.scheme()
    if scheme.mode == "static":
        cal = run.calibration_for(student)
    else:
        cal = QuantCalibration(scheme, [], None)
        cal.refit_weights(student)

    trace = stage2_train(student, data, cal, Stage2Config(
        margin=cfg.margin, neg_set_size=cfg.neg_set_size, base_lr=cfg.stage2_lr,
        sampling=cfg.sampling, epochs=cfg.stage2_epochs,
        neg_pool_size=cfg.neg_pool_size, positive_source=cfg.positive_source,
        batch_size=cfg.triplet_batch_size, weight_decay=cfg.stage2_weight_decay,
        seed=cfg.seed,
    ), audit=audit)

    formats.save_float_checkpoint(run.path("stage2.evf"), student)
    # export scales are re-fitted on the trained weights, static activation
    # scales re-calibrated from the same seeded subset
    export_scheme = QuantScheme(bits=cfg.bits, mode="static")
    export_cal = calibrate_static(student, _calibration_subset(run, bench, data),
                                  export_scheme)
    formats.save_quantized_checkpoint(run.path("stage2.evq"), student, export_cal)
    run.write_json("stage2_calibration.json", {
        "activation_scales": [float(p.scale) for p in export_cal.activation_params],
    })
    with open(run.path("stage2_metrics.jsonl"), "w") as fh:
        for record in trace:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    run.mark_done(stage_name)


def stage_eval(run: PipelineRun, force=False):
    if run.is_done("eval") and not force:
        return
    run.require("stage2")
    bench = run.benchmark()
    student = formats.load_float_checkpoint(run.path("stage2.evf"))
    scales = run.read_json("stage2_calibration.json")["activation_scales"]
    for mode in ("static", "dynamic"):
        scheme = QuantScheme(bits=run.cfg.bits, mode=mode)
        if mode == "static":
            from .quant import QuantParams

            cal = QuantCalibration(scheme, [], [
                QuantParams(alpha=np.asarray(scheme.qmax / s),
                            scale=np.asarray(float(s)), bits=scheme.bits)
                for s in scales
            ])
        else:
            cal = QuantCalibration(scheme, [], None)
        cal.refit_weights(student)
        _eval_and_store(run, f"stage2_{mode}", ptq(student, cal), bench)
    run.mark_done("eval")


def stage_angles(run: PipelineRun, force=False):
    if run.is_done("angles") and not force:
        return
    run.require("eval")
    bench = run.benchmark()
    samples, classes = bench.test_samples(), bench.class_set()
    stage1 = formats.load_float_checkpoint(run.path("stage1.evf"))
    stage2 = formats.load_float_checkpoint(run.path("stage2.evf"))
    mode = run.cfg.quant_mode

    conditions = {
        "float": stage1,
        "ptq": _quantized_view(run, stage1, mode),
        "stage2": _stage2_quantized(run, stage2, mode),
    }
    means = {}
    for name, encoder in conditions.items():
        stats = angle_stats(encoder, samples, classes)
        formats.write_angle_histogram_csv(run.path(f"angles_{name}.csv"), stats)
        means[name] = stats.mean_deg
    run.write_json("angles.json", {"mean_deg": means, "quant_mode": mode})
    run.mark_done("angles")


def _stage2_quantized(run, student, mode):
    scheme = QuantScheme(bits=run.cfg.bits, mode=mode)
    if mode == "dynamic":
        cal = QuantCalibration(scheme, [], None)
    else:
        from .quant import QuantParams

        scales = run.read_json("stage2_calibration.json")["activation_scales"]
        cal = QuantCalibration(scheme, [], [
            QuantParams(alpha=np.asarray(scheme.qmax / s),
                        scale=np.asarray(float(s)), bits=scheme.bits)
            for s in scales
        ])
    cal.refit_weights(student)
    return ptq(student, cal)


def stage_report(run: PipelineRun, force=False):
    if run.is_done("report") and not force:
        return
    run.require("eval")
    mode = run.cfg.quant_mode
    rows = [
        ("stage-1 (float)", run.read_json("eval_float.json")),
        ("+PTQ", run.read_json(f"eval_ptq_{mode}.json")),
        ("+stage-2", run.read_json(f"eval_stage2_{mode}.json")),
    ]
    table = {
        label: {
            "non_rgb": rep["acc_nonrgb"],
            "rgb": rep["acc_rgb"],
            "avg": rep["acc_avg"],
        }
        for label, rep in rows
    }
    run.write_json("report.json", {"quant_mode": mode, "bits": run.cfg.bits,
                                   "accuracy": table})
    lines = [
        f"open-vocabulary accuracy ({mode} quantization, {run.cfg.bits}-bit)",
        f"{'method':<18}{'non-RGB':>10}{'RGB':>10}{'Avg':>10}",
    ]
    for label, rep in rows:
        lines.append(f"{label:<18}{rep['acc_nonrgb']:>10.3f}{rep['acc_rgb']:>10.3f}"
                     f"{rep['acc_avg']:>10.3f}")
    with open(run.path("report.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    run.mark_done("report")


PIPELINE_STAGES = (
    ("gen", stage_gen),
    ("curate", stage_curate),
    ("stage1", stage_stage1),
    ("calibrate", stage_calibrate),
    ("ptq-eval", stage_ptq_eval),
    ("stage2", stage_stage2),
    ("eval", stage_eval),
    ("angles", stage_angles),
    ("report", stage_report),
)


def run_pipeline(cfg: Config, run_dir, force=False, one_stage=False) -> dict:
    """Run every stage in order; returns the headline numbers.

    With `one_stage` the distillation stage is replaced by a random
    initialization, so stage 2 trains its contrastive objective from scratch.
    """
    run = PipelineRun(run_dir, cfg)
    for name, fn in PIPELINE_STAGES:
        if one_stage and name == "stage1":
            stage_stage1_random(run, force=force)
            continue
        fn(run, force=force)
    return summarize(run)


def summarize(run: PipelineRun) -> dict:
    mode = run.cfg.quant_mode
    out = {"config_hash": run.hash, "quant_mode": mode}
    for name in EVAL_CONDITIONS:
        try:
            rep = run.read_json(f"eval_{name}.json")
        except FileNotFoundError:
            continue
        out[f"acc_{name}"] = rep["acc_avg"]
        out[f"acc_{name}_rgb"] = rep["acc_rgb"]
        out[f"acc_{name}_nonrgb"] = rep["acc_nonrgb"]
    try:
        out["angles"] = run.read_json("angles.json")["mean_deg"]
    except FileNotFoundError:
        pass
    out["acc_ptq"] = out.get(f"acc_ptq_{mode}")
    out["acc_stage2"] = out.get(f"acc_stage2_{mode}")
    return out
