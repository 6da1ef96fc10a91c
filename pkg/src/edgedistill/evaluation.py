"""Open-vocabulary classification accuracy and feature-angle statistics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError, DegenerateInputError

ANGLE_BINS = 90
ANGLE_RANGE_DEG = (0.0, 180.0)


@dataclass
class ClassSet:
    names: list
    text_features: np.ndarray  # [|C|, D], unit-norm rows

    def __post_init__(self):
        self.text_features = np.asarray(self.text_features, dtype=np.float64)
        if len(self.names) != self.text_features.shape[0]:
            raise ContractError(
                f"{len(self.names)} names but {self.text_features.shape[0]} feature rows"
            )
        if len(self.names) < 2:
            raise ContractError("class set needs at least 2 entries")
        norms = np.linalg.norm(self.text_features, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ContractError("class text features must be unit-norm rows")

    def __len__(self):
        return len(self.names)


@dataclass
class AngleStats:
    mean_deg: float
    histogram: np.ndarray  # counts per 2-degree bin over [0, 180]

    def bins(self):
        edges = np.linspace(*ANGLE_RANGE_DEG, ANGLE_BINS + 1)
        return edges[:-1]


@dataclass
class EvalReport:
    acc_nonrgb: float
    acc_rgb: float
    acc_avg: float
    confusion_rgb: np.ndarray
    confusion_nonrgb: np.ndarray
    angle_stats: dict = field(default_factory=dict)

    def to_dict(self):
        out = {
            "acc_nonrgb": self.acc_nonrgb,
            "acc_rgb": self.acc_rgb,
            "acc_avg": self.acc_avg,
            "confusion_rgb": self.confusion_rgb.tolist(),
            "confusion_nonrgb": self.confusion_nonrgb.tolist(),
        }
        if self.angle_stats:
            out["angle_stats"] = {
                k: {"mean_deg": v.mean_deg, "histogram": v.histogram.tolist()}
                for k, v in self.angle_stats.items()
            }
        return out


def _normalize(embedding):
    embedding = np.asarray(embedding, dtype=np.float64)
    norm = np.linalg.norm(embedding)
    if norm == 0.0:
        raise DegenerateInputError("cannot classify a zero embedding")
    return embedding / norm


def classify(embedding, classes: ClassSet) -> int:
    """Argmax cosine similarity against the class text rows; ties -> lowest."""
    sims = classes.text_features @ _normalize(embedding)
    return int(np.argmax(sims))


def _classify_batch(embeddings, classes):
    norms = np.linalg.norm(embeddings, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError("cannot classify a zero embedding")
    sims = (embeddings / norms[:, None]) @ classes.text_features.T
    return np.argmax(sims, axis=1)


def evaluate(encoder, samples, classes: ClassSet) -> EvalReport:
    """Top-1 accuracy per modality plus confusion counts over labeled pairs."""
    n_classes = len(classes)
    labels = []
    for i, s in enumerate(samples):
        if s.label is None or not 0 <= s.label < n_classes:
            raise DataError(f"sample {i} has label {s.label} outside the class set")
        labels.append(s.label)
    labels = np.asarray(labels)

    rgb = np.stack([s.rgb for s in samples])
    nonrgb = np.stack([s.nonrgb for s in samples])
    pred_rgb = _classify_batch(encoder.embed(rgb), classes)
    pred_nonrgb = _classify_batch(encoder.embed(nonrgb), classes)

    conf_rgb = np.zeros((n_classes, n_classes), dtype=np.int64)
    conf_nonrgb = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf_rgb, (labels, pred_rgb), 1)
    np.add.at(conf_nonrgb, (labels, pred_nonrgb), 1)

    acc_rgb = float(np.mean(pred_rgb == labels))
    acc_nonrgb = float(np.mean(pred_nonrgb == labels))
    return EvalReport(
        acc_nonrgb=acc_nonrgb,
        acc_rgb=acc_rgb,
        acc_avg=(acc_nonrgb + acc_rgb) / 2,
        confusion_rgb=conf_rgb,
        confusion_nonrgb=conf_nonrgb,
    )


def angles_to_true_class(embeddings, labels, classes: ClassSet):
    """Per-sample angle (degrees) to the true class text feature."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(embeddings, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError("zero embedding has no angle")
    cos = np.sum(embeddings / norms[:, None] * classes.text_features[labels], axis=1)
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def angle_stats(encoder, samples, classes: ClassSet) -> AngleStats:
    """Mean angle and fixed-bin histogram over both modalities of the samples."""
    labels = np.asarray([s.label for s in samples])
    rgb = np.stack([s.rgb for s in samples])
    nonrgb = np.stack([s.nonrgb for s in samples])
    angles = np.concatenate([
        angles_to_true_class(encoder.embed(rgb), labels, classes),
        angles_to_true_class(encoder.embed(nonrgb), labels, classes),
    ])
    hist, _ = np.histogram(angles, bins=ANGLE_BINS, range=ANGLE_RANGE_DEG)
    return AngleStats(mean_deg=float(np.mean(angles)), histogram=hist)
