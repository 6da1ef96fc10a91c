"""Automatic dataset curation and pseudo-labeling from teacher features.

Confidence is the maximum softmax over temperature-scaled image-text
similarities against a broad label superset; samples below the threshold
tau_c are dropped together with their non-RGB counterparts. The softmax
temperature (default 100, the usual logit-scale convention for unit-norm
features) is what makes a threshold like 0.25 meaningful for supersets
larger than a handful of labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import CuratedDataset
from .errors import ContractError, CurationEmptyError

DEFAULT_TEMPERATURE = 100.0
UNIT_NORM_TOL = 1e-6


@dataclass
class LabelSuperset:
    labels: list
    text_features: np.ndarray  # [|S|, D], unit-norm rows

    def __post_init__(self):
        self.text_features = np.asarray(self.text_features, dtype=np.float64)
        if len(self.labels) != self.text_features.shape[0]:
            raise ContractError(
                f"{len(self.labels)} labels but {self.text_features.shape[0]} feature rows"
            )
        if len(self.labels) < 2:
            raise ContractError("label superset needs at least 2 entries")
        norms = np.linalg.norm(self.text_features, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            raise ContractError("superset text features must be unit-norm rows")

    def __len__(self):
        return len(self.labels)


def _check_unit(feature):
    feature = np.asarray(feature, dtype=np.float64)
    if abs(np.linalg.norm(feature) - 1.0) > UNIT_NORM_TOL:
        raise ContractError("feature must be unit-norm")
    return feature


def _softmax(logits):
    z = logits - np.max(logits)
    e = np.exp(z)
    return e / e.sum()


def confidence_score(teacher_feature, superset: LabelSuperset, temperature=DEFAULT_TEMPERATURE):
    """Max softmax of temperature-scaled similarities; lies in (1/|S|, 1]."""
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    feature = _check_unit(teacher_feature)
    sims = superset.text_features @ feature
    return float(np.max(_softmax(temperature * sims)))


def pseudo_label(teacher_feature, superset: LabelSuperset) -> int:
    """Superset index with highest similarity; ties go to the lowest index."""
    feature = _check_unit(teacher_feature)
    sims = superset.text_features @ feature
    return int(np.argmax(sims))


def curate(raw_samples, teacher_features, superset: LabelSuperset, tau_c,
           temperature=DEFAULT_TEMPERATURE) -> CuratedDataset:
    """Keep the pairs whose RGB teacher feature scores confidence >= tau_c.

    Teacher features are normalized before scoring; judging uses the RGB
    modality only, non-RGB counterparts follow their pair.
    """
    teacher_features = np.asarray(teacher_features, dtype=np.float64)
    if len(raw_samples) != teacher_features.shape[0]:
        raise ContractError(
            f"{len(raw_samples)} samples but {teacher_features.shape[0]} teacher features"
        )
    norms = np.linalg.norm(teacher_features, axis=1, keepdims=True)
    unit = teacher_features / norms

    kept, confidences, labels = [], [], []
    for sample, feature in zip(raw_samples, unit):
        c = confidence_score(feature, superset, temperature)
        if c >= tau_c:
            kept.append(sample)
            confidences.append(c)
            labels.append(pseudo_label(feature, superset))
    if not kept:
        raise CurationEmptyError(tau_c)
    return CuratedDataset(
        samples=kept,
        confidences=np.asarray(confidences),
        pseudo_labels=np.asarray(labels, dtype=np.intp),
        tau_c=float(tau_c),
    )
