"""Paired-sample containers shared by curation, training, and evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PairedSample:
    rgb: np.ndarray
    nonrgb: np.ndarray
    label: int | None = None  # evaluation-only ground truth


@dataclass
class CuratedDataset:
    samples: list
    confidences: np.ndarray
    pseudo_labels: np.ndarray
    tau_c: float

    def __len__(self):
        return len(self.samples)

    def rgb_matrix(self):
        return np.stack([s.rgb for s in self.samples])

    def nonrgb_matrix(self):
        return np.stack([s.nonrgb for s in self.samples])
