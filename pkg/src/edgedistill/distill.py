"""Stage 1: dual-modality feature distillation from frozen teacher features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import CuratedDataset
from .encoder import DenseEncoder
from .errors import ContractError, DivergenceError
from .optim import CosineSchedule, OptimizerState, adamw_step


@dataclass
class Stage1Config:
    base_lr: float = 1e-4
    min_lr: float = 5e-6
    weight_decay: float = 0.05
    epochs: int = 120
    batch_size: int = 32
    modalities: str = "both"  # both | rgb | nonrgb
    seed: int = 0


def row_l1(a: Tensor, b: Tensor) -> Tensor:
    """Per-row mean absolute difference between two [B, D] tensors."""
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    return ad.mean(abs(a - b), axis=1)


def stage1_loss(student_rgb: Tensor, student_nonrgb: Tensor, teacher: Tensor) -> Tensor:
    """Batch mean of L1(teacher, nonrgb) + L1(teacher, rgb).

    The L1 is a per-row mean over embedding dimensions so the loss scale is
    independent of the embedding size. Symmetric in the two student args.
    """
    return ad.mean(row_l1(teacher, student_nonrgb) + row_l1(teacher, student_rgb))


def stage1_train(student: DenseEncoder, data: CuratedDataset, teacher_features,
                 config: Stage1Config):
    """Train the shared-weight student on both modalities with AdamW + cosine lr.

    Returns the per-epoch mean loss trace; the student is updated in place.
    """
    if len(data) == 0:
        raise ContractError("curated dataset is empty")
    if config.modalities not in ("both", "rgb", "nonrgb"):
        raise ContractError(f"unknown modalities setting {config.modalities!r}")

    teacher = np.asarray(teacher_features, dtype=np.float64)
    rgb = data.rgb_matrix()
    nonrgb = data.nonrgb_matrix()
    n = len(data)

    student.set_trainable(True)
    state = OptimizerState(
        params=student.parameters(),
        schedule=CosineSchedule(config.base_lr, config.min_lr, config.epochs),
        weight_decay=config.weight_decay,
    )
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))

    trace = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            t = Tensor(teacher[idx])
            if config.modalities == "both":
                s_rgb = student.forward(Tensor(rgb[idx]))
                s_nonrgb = student.forward(Tensor(nonrgb[idx]))
                loss = stage1_loss(s_rgb, s_nonrgb, t)
            elif config.modalities == "rgb":
                loss = ad.mean(row_l1(t, student.forward(Tensor(rgb[idx]))))
            else:
                loss = ad.mean(row_l1(t, student.forward(Tensor(nonrgb[idx]))))
            value = float(loss.data)
            if not np.isfinite(value):
                raise DivergenceError(
                    f"distillation loss became non-finite at epoch {epoch}"
                )
            loss.backward()
            adamw_step(state, epoch)
            epoch_losses.append(value)
        trace.append(float(np.mean(epoch_losses)))
    return trace
