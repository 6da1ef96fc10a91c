"""End-to-end acceptance gate for the two-stage adaptation pipeline.

Twelve checks, one printed verdict line each: quantization math, gradient
fidelity, brute-force oracle agreement, triplet-window certification, the
quantization-gap recovery headline, feature-angle ordering, the
dual-modality / curation-threshold / negative-sampling / two-stage
ablations, size accounting, and byte-level determinism of every artifact.
The expensive fixtures (three seeded pipeline runs and their ablation
variants) are shared session-wide.
"""

import math
import os
import shutil
import time

import numpy as np
import pytest

from edgedistill import formats
from edgedistill import pipeline as pl
from edgedistill.autodiff import (Tensor, absolute, add, finite_difference_grad,
                                  gather_rows, l2_normalize, matmul, mean, mul,
                                  relu, segment_mean, sub, tensor_sum,
                                  transpose)
from edgedistill.config import Config, canonical_text
from edgedistill.curation import (LabelSuperset, confidence_score, curate,
                                  pseudo_label)
from edgedistill.dataset import PairedSample
from edgedistill.encoder import init_encoder
from edgedistill.evaluation import ClassSet, classify, evaluate
from edgedistill.qacl import filter_semi_hard, select_positive, triplet_loss
from edgedistill.quant import (QuantScheme, calibrate_static, dequantize,
                               fit_scale, model_size, quantize)

SEEDS = (0, 1, 2)

# benchmark + training settings for the headline runs: noisy enough that
# 3-bit quantization opens a visible accuracy gap, small enough to finish
# three seeds in minutes
BASE = dict(hidden_dims=(256, 256), noise_sigma=0.12, samples_per_class=400,
            test_fraction=0.5, stage1_epochs=50, bits=3, margin=0.1,
            stage2_lr=5e-5, stage2_epochs=50)

# distractor-heavy settings for the curation-threshold sweep: 25 distractor
# labels against 5 classes, with enough feature noise that roughly a quarter
# of the raw pseudo-labels are wrong
CURATION_BASE = dict(n_classes=5, n_distractors=25, feature_dim=32,
                     input_dim=32, samples_per_class=400, noise_sigma=0.35,
                     test_fraction=0.4, temperature=15.0, hidden_dims=(128, 128),
                     stage1_lr=1e-3, stage1_epochs=60, bits=4, margin=0.1,
                     stage2_lr=3e-4, stage2_epochs=60)
TAU_LOW, TAU_MID, TAU_HIGH = 0.05, 0.8, 0.98

SMALL = Config(seed=0, n_classes=3, n_distractors=3, feature_dim=16,
               input_dim=12, samples_per_class=16, noise_sigma=0.1,
               hidden_dims=(16,), stage1_epochs=4, batch_size=8,
               calibration_pairs=8, bits=5, margin=0.5, stage2_lr=1e-4,
               stage2_epochs=2, neg_pool_size=6)

GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "golden")


def _verdict(capsys, num, ok, detail):
    with capsys.disabled():
        print(f"[criterion {num:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {num}: {detail}"


# -- shared pipeline fixtures -------------------------------------------------

STAGE_FILES = {
    "gen": ("benchmark", "config.snapshot"),
    "curate": ("curated.json",),
    "stage1": ("stage1.evf", "stage1_trace.json"),
    "calibrate": ("calibration.json",),
}


def _seed_variant(src_dir, dst_dir, variant_cfg, stages):
    """Start a variant run from another run's byte-identical early artifacts.

    Only stages unaffected by the varied settings may be carried over; they
    are re-stamped under the variant's config hash.
    """
    dst = pl.PipelineRun(dst_dir, variant_cfg)
    for stage in stages:
        for name in STAGE_FILES[stage]:
            src = os.path.join(src_dir, name)
            out = os.path.join(dst_dir, name)
            if os.path.isdir(src):
                shutil.copytree(src, out, dirs_exist_ok=True)
            else:
                shutil.copy(src, out)
        dst.mark_done(stage)
    with open(dst.path("config.snapshot"), "w") as fh:
        fh.write(canonical_text(variant_cfg))
    return dst


@pytest.fixture(scope="session")
def main_runs(tmp_path_factory):
    """Three seeded full pipeline runs with stage-2 triplet auditing."""
    root = tmp_path_factory.mktemp("main")
    t0 = time.perf_counter()
    runs = []
    for seed in SEEDS:
        cfg = Config(seed=seed, **BASE)
        run = pl.PipelineRun(str(root / f"seed{seed}"), cfg)
        audit = []
        for name, fn in pl.PIPELINE_STAGES:
            if name == "stage2":
                pl.stage_stage2(run, audit=audit)
            else:
                fn(run)
        runs.append({"run": run, "summary": pl.summarize(run), "audit": audit})
    return {"runs": runs, "elapsed": time.perf_counter() - t0}


def _mean(runs, key):
    return float(np.mean([r["summary"][key] for r in runs]))


@pytest.fixture(scope="session")
def single_modality_runs(tmp_path_factory, main_runs):
    """Stage-1 retrained per modality from the same benchmarks and curation."""
    root = tmp_path_factory.mktemp("modality")
    means = {}
    for mod in ("rgb", "nonrgb"):
        accs = []
        for r in main_runs["runs"]:
            cfg = r["run"].cfg.replace(modalities=mod)
            dst = _seed_variant(r["run"].run_dir,
                                str(root / f"{mod}_{cfg.seed}"), cfg,
                                ("gen", "curate"))
            pl.stage_stage1(dst)
            bench = dst.benchmark()
            enc = formats.load_float_checkpoint(dst.path("stage1.evf"))
            rep = evaluate(enc, bench.test_samples(), bench.class_set())
            accs.append(rep.to_dict()["acc_avg"])
        means[mod] = float(np.mean(accs))
    return means


@pytest.fixture(scope="session")
def hard_sampling_runs(tmp_path_factory, main_runs):
    """Stage 2 rerun with hard negative mining from the same stage-1 weights."""
    root = tmp_path_factory.mktemp("hard")
    accs = []
    for r in main_runs["runs"]:
        cfg = r["run"].cfg.replace(sampling="hard")
        dst = _seed_variant(r["run"].run_dir, str(root / f"s{cfg.seed}"), cfg,
                            ("gen", "curate", "stage1", "calibrate"))
        pl.stage_stage2(dst)
        pl.stage_eval(dst)
        accs.append(pl.summarize(dst)["acc_stage2"])
    return float(np.mean(accs))


@pytest.fixture(scope="session")
def one_stage_runs(tmp_path_factory, main_runs):
    """Contrastive training from random init on the same benchmarks."""
    root = tmp_path_factory.mktemp("onestage")
    accs = []
    for r in main_runs["runs"]:
        cfg = r["run"].cfg
        dst_dir = str(root / f"s{cfg.seed}")
        _seed_variant(r["run"].run_dir, dst_dir, cfg, ("gen", "curate"))
        summary = pl.run_pipeline(cfg, dst_dir, one_stage=True)
        accs.append(summary["acc_stage2"])
    return float(np.mean(accs))


@pytest.fixture(scope="session")
def curation_sweep(tmp_path_factory):
    """Full pipelines at three confidence thresholds, three seeds each."""
    root = tmp_path_factory.mktemp("curation")
    means = {}
    for tau in (TAU_LOW, TAU_MID, TAU_HIGH):
        accs = []
        for seed in SEEDS:
            cfg = Config(seed=seed, tau_c=tau, **CURATION_BASE)
            summary = pl.run_pipeline(cfg, str(root / f"t{tau}_s{seed}"))
            accs.append(summary["acc_stage2"])
        means[tau] = float(np.mean(accs))
    return means


# -- criteria -----------------------------------------------------------------


def test_01_quantization_round_trip_grid(capsys):
    t0 = time.perf_counter()
    alpha = 0.5  # dyadic so the saturation value reconstructs exactly
    issues = []
    for bits in (4, 8):
        params = fit_scale(np.array([alpha, -alpha / 2]), bits)
        s = float(params.scale)
        grid = np.linspace(-2 * alpha, 2 * alpha, 100_000)
        rt = dequantize(quantize(grid, params), params)
        inside = np.abs(grid) <= alpha
        if not np.all(np.abs(rt[inside] - grid[inside]) <= 1 / (2 * s) + 1e-12):
            issues.append(f"{bits}-bit in-range error bound")
        if not np.array_equal(rt[~inside], np.sign(grid[~inside]) * alpha):
            issues.append(f"{bits}-bit saturation")
        if not np.array_equal(quantize(-grid, params), -quantize(grid, params)):
            issues.append(f"{bits}-bit symmetry")
        if not np.all(np.diff(rt) >= 0):
            issues.append(f"{bits}-bit monotonicity")
    elapsed = time.perf_counter() - t0
    if elapsed >= 1.0:
        issues.append(f"too slow ({elapsed:.2f}s)")
    _verdict(capsys, 1, not issues,
             f"10^5-point grid at 4/8 bits, {elapsed*1e3:.0f} ms"
             + (f"; issues: {issues}" if issues else ""))


def test_02_gradient_fidelity(capsys):
    rng = np.random.default_rng(20240601)
    t0 = time.perf_counter()

    def away_from_zero(shape):
        x = rng.standard_normal(shape)
        return x + 0.2 * np.sign(x)  # keep clear of relu/abs kinks

    # each factory freezes its random constants so the finite-difference
    # probe sees a deterministic function of the input
    def frozen(draw, op):
        c = draw()
        return lambda t: op(t, Tensor(c))

    factories = {
        "add": lambda: frozen(lambda: rng.standard_normal((4, 5)), add),
        "sub": lambda: frozen(lambda: rng.standard_normal((4, 5)),
                              lambda t, c: sub(c, t)),
        "mul": lambda: frozen(lambda: rng.standard_normal((1, 5)), mul),
        "matmul": lambda: frozen(lambda: rng.standard_normal((5, 3)), matmul),
        "transpose": lambda: frozen(
            lambda: rng.standard_normal((4, 2)),
            lambda t, c: matmul(transpose(t), c)),
        "relu": lambda: relu,
        "absolute": lambda: absolute,
        "tensor_sum": lambda: (lambda t: tensor_sum(t, axis=0)),
        "mean": lambda: (lambda t: mean(t, axis=1, keepdims=True)),
        "gather_rows": lambda: (lambda t: gather_rows(t, [0, 2, 2, 1])),
        "segment_mean": lambda: (lambda t: segment_mean(
            mean(t, axis=1), [0, 1, 0, 1], 2)),
        "l2_normalize": lambda: l2_normalize,
    }
    worst = {}
    for name, factory in factories.items():
        worst[name] = 0.0
        for _ in range(20):
            build = factory()
            x = away_from_zero((4, 5))
            t = Tensor(x, requires_grad=True)
            total = tensor_sum(build(t))
            total.backward()
            got = t.grad
            want = finite_difference_grad(
                lambda v: float(tensor_sum(build(Tensor(v))).data), x)
            rel = np.linalg.norm(got - want) / max(np.linalg.norm(want), 1e-12)
            worst[name] = max(worst[name], rel)
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v < 1e-4}
    ok = not bad and elapsed < 30
    _verdict(capsys, 2, ok,
             f"{len(factories)} ops x 20 instances, worst rel err "
             f"{max(worst.values()):.2e}, {elapsed:.1f}s"
             + (f"; failing: {bad}" if bad else ""))


def _unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_03_brute_force_oracles(capsys):
    rng = np.random.default_rng(77)
    t0 = time.perf_counter()
    failures = []

    def softmax_conf_oracle(f, protos, temperature):
        logits = [temperature * sum(f[k] * p[k] for k in range(len(f)))
                  for p in protos]
        top = max(logits)
        exps = [math.exp(v - top) for v in logits]
        return max(exps) / sum(exps)

    for i in range(100):
        d, m = 8, 6
        protos = _unit_rows(rng, m, d)
        sup = LabelSuperset([f"l{j}" for j in range(m)], protos)
        f = _unit_rows(rng, 1, d)[0]

        # confidence_score
        want = softmax_conf_oracle(f, protos, 50.0)
        got = confidence_score(f, sup, 50.0)
        if abs(got - want) > 1e-9:
            failures.append(f"confidence_score[{i}]")

        # pseudo_label: scan argmax, ties to the lowest index
        sims = [sum(f[k] * p[k] for k in range(d)) for p in protos]
        best = 0
        for j in range(1, m):
            if sims[j] > sims[best]:
                best = j
        if pseudo_label(f, sup) != best:
            failures.append(f"pseudo_label[{i}]")

        # curate: brute-force threshold filter
        n = 12
        feats = _unit_rows(rng, n, d)
        samples = [PairedSample(rng.standard_normal(3), rng.standard_normal(3))
                   for _ in range(n)]
        tau = rng.uniform(0.2, 0.9)
        confs = [softmax_conf_oracle(feats[j], protos, 50.0) for j in range(n)]
        keep = [j for j in range(n) if confs[j] >= tau]
        if keep:
            data = curate(samples, feats, sup, tau, 50.0)
            ok = ([id(s) for s in data.samples] == [id(samples[j]) for j in keep]
                  and np.allclose(data.confidences, [confs[j] for j in keep],
                                  atol=1e-9, rtol=0))
            if not ok:
                failures.append(f"curate[{i}]")

        # select_positive: scan min mean-L1, ties to the lowest index
        anchor = rng.standard_normal(d)
        cands = rng.standard_normal((7, d))
        dists = [np.mean(np.abs(cands[j] - anchor)) for j in range(7)]
        best = 0
        for j in range(1, 7):
            if dists[j] < dists[best]:
                best = j
        if select_positive(anchor, cands) != best:
            failures.append(f"select_positive[{i}]")

        # filter_semi_hard: draw-order scan with strict inequalities
        pos = anchor + 0.05 * rng.standard_normal(d)
        negs = anchor + rng.uniform(0.0, 0.2, size=(9, 1)) * np.sign(
            rng.standard_normal((9, d)))
        margin = 0.08
        d_ap = float(np.mean(np.abs(anchor - pos)))
        want_kept = []
        for j in range(9):
            d_an = float(np.mean(np.abs(anchor - negs[j])))
            if d_ap < d_an < d_ap + margin:
                want_kept.append(j)
                if len(want_kept) == 3:
                    break
        if filter_semi_hard(anchor, pos, negs, margin, max_keep=3) != want_kept:
            failures.append(f"filter_semi_hard[{i}]")

        # triplet_loss: scalar loops
        chosen = negs[:4]
        want = 0.0
        for j in range(4):
            d_an = sum(abs(anchor[k] - chosen[j][k]) for k in range(d)) / d
            want += d_ap - d_an + margin
        want /= 4
        if abs(triplet_loss(anchor, pos, chosen, margin) - want) > 1e-9:
            failures.append(f"triplet_loss[{i}]")

        # classify: scan max cosine over class prototypes
        classes = ClassSet([f"c{j}" for j in range(5)], _unit_rows(rng, 5, d))
        emb = 3.0 * rng.standard_normal(d)
        norm = math.sqrt(sum(v * v for v in emb))
        cos = [sum(emb[k] * classes.text_features[j][k] for k in range(d)) / norm
               for j in range(5)]
        best = 0
        for j in range(1, 5):
            if cos[j] > cos[best]:
                best = j
        if classify(emb, classes) != best:
            failures.append(f"classify[{i}]")

    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 30
    _verdict(capsys, 3, ok,
             f"7 functions x 100 instances vs scalar oracles, {elapsed:.1f}s"
             + (f"; failures: {failures[:5]}" if failures else ""))


def test_04_triplet_window_certification(capsys, main_runs):
    total = violations = 0
    for r in main_runs["runs"]:
        for emb, triplets in r["audit"]:
            for t in triplets:
                d_ap = float(np.mean(np.abs(emb[t.anchor] - emb[t.positive])))
                for n in t.negatives:
                    d_an = float(np.mean(np.abs(emb[t.anchor] - emb[n])))
                    total += 1
                    if not (d_ap < d_an < d_ap + t.margin):
                        violations += 1
    ok = total > 0 and violations == 0
    _verdict(capsys, 4, ok,
             f"{total} emitted anchor-negative pairs recomputed, "
             f"{violations} outside the mining window")


def test_05_quantization_gap_recovery(capsys, main_runs):
    runs = main_runs["runs"]
    fl, pq, s2 = (_mean(runs, k) for k in ("acc_float", "acc_ptq", "acc_stage2"))
    recovery = (s2 - pq) / (fl - pq) if fl > pq else float("nan")
    elapsed = main_runs["elapsed"]
    ok = fl > pq and recovery >= 0.5 and elapsed < 600
    _verdict(capsys, 5, ok,
             f"3-seed means float={fl:.4f} > ptq={pq:.4f}, stage-2={s2:.4f} "
             f"recovers {recovery:.0%} of the gap ({elapsed:.0f}s)")


def test_06_angle_ordering(capsys, main_runs):
    pairs = [(r["summary"]["angles"]["ptq"], r["summary"]["angles"]["stage2"])
             for r in main_runs["runs"]]
    ok = all(p > s for p, s in pairs)
    detail = ", ".join(f"{p:.1f}>{s:.1f}" for p, s in pairs)
    _verdict(capsys, 6, ok, f"mean true-class angle (deg) PTQ vs stage-2: {detail}")


def test_07_dual_modality_advantage(capsys, main_runs, single_modality_runs):
    dual = _mean(main_runs["runs"], "acc_float")
    ok = all(dual > v for v in single_modality_runs.values())
    _verdict(capsys, 7, ok,
             f"dual={dual:.4f} vs rgb-only={single_modality_runs['rgb']:.4f}, "
             f"nonrgb-only={single_modality_runs['nonrgb']:.4f}")


def test_08_curation_threshold_sweet_spot(capsys, curation_sweep):
    low, mid, high = (curation_sweep[t] for t in (TAU_LOW, TAU_MID, TAU_HIGH))
    ok = mid > low and mid > high
    _verdict(capsys, 8, ok,
             f"3-seed mean accuracy by threshold: {TAU_LOW}->{low:.4f}, "
             f"{TAU_MID}->{mid:.4f}, {TAU_HIGH}->{high:.4f}")


def test_09_semi_hard_vs_hard(capsys, main_runs, hard_sampling_runs):
    semi = _mean(main_runs["runs"], "acc_stage2")
    ok = semi >= hard_sampling_runs
    _verdict(capsys, 9, ok,
             f"semi-hard={semi:.4f} vs hard={hard_sampling_runs:.4f}")


def test_10_two_stage_advantage(capsys, main_runs, one_stage_runs):
    two = _mean(main_runs["runs"], "acc_stage2")
    ok = two > one_stage_runs
    _verdict(capsys, 10, ok,
             f"two-stage={two:.4f} vs one-stage={one_stage_runs:.4f}")


def test_11_size_accounting(capsys, tmp_path):
    rng = np.random.default_rng(11)
    cfg = Config()
    enc = init_encoder(cfg.input_dim, cfg.hidden_dims, cfg.feature_dim, rng)
    float_bytes = model_size(enc)
    int8_bytes = model_size(enc, QuantScheme(bits=8, mode="static"))
    ratio = float_bytes / int8_bytes

    evf = tmp_path / "student.evf"
    formats.save_float_checkpoint(str(evf), enc)
    pairs = [PairedSample(rng.standard_normal(cfg.input_dim),
                          rng.standard_normal(cfg.input_dim)) for _ in range(8)]
    cal = calibrate_static(enc, pairs, QuantScheme(bits=8, mode="static"))
    evq = tmp_path / "student.evq"
    formats.save_quantized_checkpoint(str(evq), enc, cal)

    byte_exact = (os.path.getsize(evf) == float_bytes
                  and os.path.getsize(evq) == int8_bytes)
    ok = ratio >= 3.9 and byte_exact
    _verdict(capsys, 11, ok,
             f"default student f32 {float_bytes} B -> int8 {int8_bytes} B "
             f"({ratio:.2f}x), checkpoint files byte-exact={byte_exact}")


def test_12_determinism_and_formats(capsys, tmp_path):
    issues = []

    # identical seeds, independent run directories
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    sa = pl.run_pipeline(SMALL, a)
    sb = pl.run_pipeline(SMALL, b)
    if sa != sb:
        issues.append("summaries differ")
    for name in ("benchmark/rgb.eve", "benchmark/teacher.eve", "curated.json",
                 "stage1.evf", "stage2.evf", "stage2.evq", "report.json"):
        with open(os.path.join(a, name), "rb") as fa, \
             open(os.path.join(b, name), "rb") as fb:
            if fa.read() != fb.read():
                issues.append(f"{name} bytes differ")

    # fresh round trips are bit-exact
    rng = np.random.default_rng(12)
    mat = rng.standard_normal((4, 6)).astype(np.float32)
    p1 = tmp_path / "m.eve"
    formats.write_embeddings(str(p1), mat, ids=["a", "b", "日本語", "d"])
    back, ids = formats.read_embeddings(str(p1))
    p2 = tmp_path / "m2.eve"
    formats.write_embeddings(str(p2), back, ids=ids)
    if p1.read_bytes() != p2.read_bytes() or not np.array_equal(back, mat):
        issues.append("embedding round trip")

    enc = formats.load_float_checkpoint(os.path.join(a, "stage2.evf"))
    p3 = tmp_path / "re.evf"
    formats.save_float_checkpoint(str(p3), enc)
    if p3.read_bytes() != open(os.path.join(a, "stage2.evf"), "rb").read():
        issues.append("float checkpoint round trip")

    q = formats.load_quantized_checkpoint(os.path.join(a, "stage2.evq"))
    p4 = tmp_path / "re.evq"
    formats.save_quantized_checkpoint(str(p4), q.encoder, q.calibration)
    if p4.read_bytes() != open(os.path.join(a, "stage2.evq"), "rb").read():
        issues.append("quantized checkpoint round trip")

    # committed golden files re-encode byte-identically
    gm, gids = formats.read_embeddings(os.path.join(GOLDEN_DIR, "reference.eve"))
    g1 = tmp_path / "g.eve"
    formats.write_embeddings(str(g1), gm, ids=gids)
    if g1.read_bytes() != open(os.path.join(GOLDEN_DIR, "reference.eve"), "rb").read():
        issues.append("golden embeddings")
    genc = formats.load_float_checkpoint(os.path.join(GOLDEN_DIR, "reference.evf"))
    g2 = tmp_path / "g.evf"
    formats.save_float_checkpoint(str(g2), genc)
    if g2.read_bytes() != open(os.path.join(GOLDEN_DIR, "reference.evf"), "rb").read():
        issues.append("golden float checkpoint")
    gq = formats.load_quantized_checkpoint(os.path.join(GOLDEN_DIR, "reference.evq"))
    g3 = tmp_path / "g.evq"
    formats.save_quantized_checkpoint(str(g3), gq.encoder, gq.calibration)
    if g3.read_bytes() != open(os.path.join(GOLDEN_DIR, "reference.evq"), "rb").read():
        issues.append("golden quantized checkpoint")

    _verdict(capsys, 12, not issues,
             "byte-identical reruns + bit-exact format round trips "
             "+ golden files" + (f"; issues: {issues}" if issues else ""))
