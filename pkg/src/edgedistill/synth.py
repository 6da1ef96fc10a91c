"""Seeded synthetic dual-modality benchmark.

Each class has a unit prototype in feature space; the prototypes double as
the class text features, and together with extra distractor prototypes they
form the curation superset. A sample draws latent noise around its class
prototype; that noisy latent is the (exact) teacher feature, and two frozen
random tanh networks map independently-noised latents into the RGB and
non-RGB input spaces. The student has to learn to invert both maps.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .curation import LabelSuperset
from .dataset import PairedSample
from .errors import FormatError, GenerationError
from .evaluation import ClassSet
from .formats import read_embeddings, write_embeddings

MIN_PROTO_ANGLE_DEG = 30.0
MAX_PROTO_RETRIES = 200
MANIFEST_NAME = "manifest.json"


@dataclass
class ModalityMap:
    """Frozen 2-layer tanh network from feature space to input space."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray

    def __call__(self, z):
        return np.tanh(np.asarray(z) @ self.w1.T + self.b1) @ self.w2.T


@dataclass
class SyntheticBenchmark:
    seed: int
    sigma: float
    class_names: list
    superset_labels: list
    prototypes: np.ndarray  # [K, D] unit rows, class text features
    superset_features: np.ndarray  # [K + K', D] unit rows
    rgb_inputs: np.ndarray  # [N, input_dim]
    nonrgb_inputs: np.ndarray
    teacher_features: np.ndarray  # [N, D]
    labels: np.ndarray  # [N] true class indices
    train_idx: np.ndarray
    test_idx: np.ndarray
    modality_maps: tuple = None  # (g_rgb, g_nonrgb); absent after reload

    @property
    def feature_dim(self):
        return self.prototypes.shape[1]

    @property
    def input_dim(self):
        return self.rgb_inputs.shape[1]

    def superset(self):
        return LabelSuperset(self.superset_labels, self.superset_features)

    def class_set(self):
        return ClassSet(self.class_names, self.prototypes)

    def _samples(self, idx, with_labels):
        return [
            PairedSample(self.rgb_inputs[i], self.nonrgb_inputs[i],
                         int(self.labels[i]) if with_labels else None)
            for i in idx
        ]

    def train_samples(self):
        return self._samples(self.train_idx, with_labels=False)

    def test_samples(self):
        return self._samples(self.test_idx, with_labels=True)

    def train_teacher_features(self):
        return self.teacher_features[self.train_idx]


def _random_unit_rows(rng, n, dim):
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_prototypes(rng, count, dim):
    min_cos = np.cos(np.radians(MIN_PROTO_ANGLE_DEG))
    for _ in range(MAX_PROTO_RETRIES):
        protos = _random_unit_rows(rng, count, dim)
        gram = protos @ protos.T
        np.fill_diagonal(gram, -1.0)
        if np.max(gram) < min_cos:
            return protos
    raise GenerationError(
        f"could not place {count} prototypes with pairwise angle >= "
        f"{MIN_PROTO_ANGLE_DEG} deg in dimension {dim}"
    )


def _modality_map(rng, feature_dim, input_dim):
    hidden = 2 * feature_dim
    w1 = rng.standard_normal((hidden, feature_dim)) / np.sqrt(feature_dim)
    b1 = 0.1 * rng.standard_normal(hidden)
    w2 = rng.standard_normal((input_dim, hidden)) * np.sqrt(2.0 / hidden)
    return ModalityMap(w1, b1, w2)


def generate_benchmark(seed, n_classes=8, n_distractors=8, feature_dim=64,
                       input_dim=64, samples_per_class=200, sigma=0.1,
                       test_fraction=0.25) -> SyntheticBenchmark:
    """Deterministic benchmark with a balanced per-class train/test split."""
    if n_classes < 2:
        raise GenerationError("need at least 2 classes")
    if feature_dim < 8:
        raise GenerationError("feature dimension must be >= 8")
    if sigma < 0:
        raise GenerationError("noise level must be non-negative")

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    all_protos = _sample_prototypes(rng, n_classes + n_distractors, feature_dim)
    prototypes = all_protos[:n_classes]

    g_rgb = _modality_map(rng, feature_dim, input_dim)
    g_nonrgb = _modality_map(rng, feature_dim, input_dim)

    n = n_classes * samples_per_class
    labels = np.repeat(np.arange(n_classes), samples_per_class)
    eps = sigma * rng.standard_normal((n, feature_dim))
    eps_tilde = sigma * rng.standard_normal((n, feature_dim))
    teacher = prototypes[labels] + eps
    rgb = g_rgb(teacher)
    nonrgb = g_nonrgb(prototypes[labels] + eps_tilde)

    n_test = max(1, int(round(test_fraction * samples_per_class)))
    train_idx, test_idx = [], []
    for k in range(n_classes):
        block = np.flatnonzero(labels == k)
        perm = rng.permutation(block)
        test_idx.extend(perm[:n_test])
        train_idx.extend(perm[n_test:])

    class_names = [f"class_{k:02d}" for k in range(n_classes)]
    distractor_names = [f"distractor_{k:02d}" for k in range(n_distractors)]
    return SyntheticBenchmark(
        seed=seed,
        sigma=sigma,
        class_names=class_names,
        superset_labels=class_names + distractor_names,
        prototypes=prototypes,
        superset_features=all_protos,
        rgb_inputs=rgb,
        nonrgb_inputs=nonrgb,
        teacher_features=teacher,
        labels=labels,
        train_idx=np.sort(train_idx),
        test_idx=np.sort(test_idx),
        modality_maps=(g_rgb, g_nonrgb),
    )


def save_benchmark(directory, bench: SyntheticBenchmark):
    os.makedirs(directory, exist_ok=True)
    write_embeddings(os.path.join(directory, "rgb.eve"), bench.rgb_inputs)
    write_embeddings(os.path.join(directory, "nonrgb.eve"), bench.nonrgb_inputs)
    write_embeddings(os.path.join(directory, "teacher.eve"), bench.teacher_features)
    write_embeddings(os.path.join(directory, "class_text.eve"), bench.prototypes,
                     ids=bench.class_names)
    write_embeddings(os.path.join(directory, "superset_text.eve"),
                     bench.superset_features, ids=bench.superset_labels)
    manifest = {
        "format": "edgedistill-benchmark-v1",
        "seed": bench.seed,
        "sigma": bench.sigma,
        "labels": bench.labels.tolist(),
        "train_idx": bench.train_idx.tolist(),
        "test_idx": bench.test_idx.tolist(),
    }
    with open(os.path.join(directory, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_benchmark(directory) -> SyntheticBenchmark:
    try:
        with open(os.path.join(directory, MANIFEST_NAME)) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"no benchmark manifest in {directory}")
    if manifest.get("format") != "edgedistill-benchmark-v1":
        raise FormatError(f"unrecognized benchmark manifest in {directory}")
    rgb, _ = read_embeddings(os.path.join(directory, "rgb.eve"))
    nonrgb, _ = read_embeddings(os.path.join(directory, "nonrgb.eve"))
    teacher, _ = read_embeddings(os.path.join(directory, "teacher.eve"))
    prototypes, class_names = read_embeddings(os.path.join(directory, "class_text.eve"))
    superset_features, superset_labels = read_embeddings(
        os.path.join(directory, "superset_text.eve"))
    return SyntheticBenchmark(
        seed=manifest["seed"],
        sigma=manifest["sigma"],
        class_names=class_names,
        superset_labels=superset_labels,
        prototypes=prototypes,
        superset_features=superset_features,
        rgb_inputs=rgb,
        nonrgb_inputs=nonrgb,
        teacher_features=teacher,
        labels=np.asarray(manifest["labels"], dtype=np.intp),
        train_idx=np.asarray(manifest["train_idx"], dtype=np.intp),
        test_idx=np.asarray(manifest["test_idx"], dtype=np.intp),
    )
