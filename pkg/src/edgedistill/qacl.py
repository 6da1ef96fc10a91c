"""Stage 2: quantization-aware contrastive learning over triplets.

Anchors run over both modalities of every curated sample. The positive is
the nearest same-pseudo-label candidate (opposite modality preferred),
negatives are random differing-pseudo-label draws kept only when the
semi-hard double inequality holds, and the margin loss is trained through
the fake-quantized encoder. Pseudo-labels stay frozen from curation;
triplets are rebuilt each epoch from the current quantized embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import CuratedDataset
from .encoder import DenseEncoder
from .errors import CollapseError, ContractError, DivergenceError
from .optim import ConstantSchedule, OptimizerState, adamw_step
from .quant import FakeQuantEncoder, QuantCalibration

RGB, NONRGB = 0, 1
COLLAPSE_TOL = 1e-6


@dataclass
class Stage2Config:
    margin: float = 0.3
    neg_set_size: int = 3  # J
    base_lr: float = 1e-6
    sampling: str = "semi-hard"  # semi-hard | hard
    epochs: int = 30
    neg_pool_size: int = 10
    positive_source: str = "cross-modal"  # cross-modal | any
    batch_size: int = 256  # triplets per optimizer step
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.margin <= 0:
            raise ContractError("margin must be positive")
        if self.neg_set_size < 1:
            raise ContractError("negative set size must be >= 1")
        if self.sampling not in ("semi-hard", "hard"):
            raise ContractError(f"unknown sampling strategy {self.sampling!r}")
        if self.positive_source not in ("cross-modal", "any"):
            raise ContractError(f"unknown positive source {self.positive_source!r}")


@dataclass
class Triplet:
    anchor: int  # flat index: modality * n_samples + sample index
    positive: int
    negatives: list
    margin: float


def l1_distance(u, v):
    """Mean absolute difference, the distance used throughout both stages."""
    return float(np.mean(np.abs(np.asarray(u) - np.asarray(v))))


def select_positive(anchor_feature, candidate_features):
    """Index of the L1-nearest candidate; ties go to the lowest index."""
    candidates = np.asarray(candidate_features)
    if candidates.ndim != 2 or candidates.shape[0] == 0:
        raise ContractError("positive candidate set is empty")
    dists = np.mean(np.abs(candidates - np.asarray(anchor_feature)), axis=1)
    return int(np.argmin(dists))


def filter_semi_hard(anchor_feature, positive_feature, negative_candidates, margin,
                     max_keep=None, mode="semi-hard"):
    """Retain draw-order negatives meeting the selection inequality.

    Semi-hard keeps n with d(a,p) < d(a,n) < d(a,p) + m; hard keeps
    n with d(a,n) < d(a,p). Truncates to `max_keep` when given.
    """
    d_ap = l1_distance(anchor_feature, positive_feature)
    kept = []
    for j, neg in enumerate(negative_candidates):
        d_an = l1_distance(anchor_feature, neg)
        if mode == "semi-hard":
            ok = d_ap < d_an < d_ap + margin
        else:
            ok = d_an < d_ap
        if ok:
            kept.append(j)
            if max_keep is not None and len(kept) == max_keep:
                break
    return kept


def triplet_loss(anchor_feature, positive_feature, negative_features, margin):
    """Mean over negatives of d(a,p) - d(a,n) + m; 0 with no negatives.

    No hinge is applied: under the semi-hard condition each term already
    lies in (0, m).
    """
    negatives = list(negative_features)
    if not negatives:
        return 0.0
    d_ap = l1_distance(anchor_feature, positive_feature)
    terms = [d_ap - l1_distance(anchor_feature, n) + margin for n in negatives]
    return float(np.mean(terms))


def build_epoch_triplets(pseudo_labels, embeddings, config: Stage2Config, rng):
    """Construct one epoch's triplets from current embeddings.

    `embeddings` is [2N, D]: rows 0..N-1 are RGB, rows N..2N-1 non-RGB.
    Deterministic given the rng state. Anchors whose class has no other
    member, or whose negative pool survives filtering empty, emit nothing.
    """
    labels = np.asarray(pseudo_labels)
    n = labels.shape[0]
    embeddings = np.asarray(embeddings)
    if embeddings.shape[0] != 2 * n:
        raise ContractError(
            f"expected {2 * n} embedding rows for {n} samples, got {embeddings.shape[0]}"
        )
    flat_labels = np.concatenate([labels, labels])

    by_label = {}
    for lab in np.unique(labels):
        by_label[lab] = np.flatnonzero(flat_labels == lab)
    all_indices = np.arange(2 * n)

    triplets = []
    for anchor in range(2 * n):
        sample = anchor % n
        modality = anchor // n
        lab = labels[sample]

        same = by_label[lab]
        if config.positive_source == "cross-modal":
            other_mod = (1 - modality) * n
            pool = same[(same >= other_mod) & (same < other_mod + n)]
            if pool.size == 0:
                pool = same[same != anchor]
        else:
            pool = same[same != anchor]
        pool = pool[pool != anchor]
        if pool.size == 0:
            continue

        k_star = select_positive(embeddings[anchor], embeddings[pool])
        positive = int(pool[k_star])

        neg_universe = all_indices[flat_labels != lab]
        if neg_universe.size == 0:
            continue
        draws = rng.choice(neg_universe, size=min(config.neg_pool_size, neg_universe.size),
                           replace=False)
        kept = filter_semi_hard(
            embeddings[anchor], embeddings[positive], embeddings[draws],
            config.margin, max_keep=config.neg_set_size, mode=config.sampling,
        )
        if not kept:
            continue
        triplets.append(
            Triplet(anchor=anchor, positive=positive,
                    negatives=[int(draws[j]) for j in kept], margin=config.margin)
        )
    return triplets


def _batched_loss(fq: FakeQuantEncoder, inputs, triplets, margin):
    """Forward one triplet minibatch and return the tensor loss."""
    needed = sorted({i for t in triplets for i in (t.anchor, t.positive, *t.negatives)})
    pos_of = {flat: j for j, flat in enumerate(needed)}
    emb = fq.forward(Tensor(inputs[needed]))

    a_idx = [pos_of[t.anchor] for t in triplets]
    p_idx = [pos_of[t.positive] for t in triplets]
    n_idx, seg = [], []
    for ti, t in enumerate(triplets):
        for neg in t.negatives:
            n_idx.append(pos_of[neg])
            seg.append(ti)

    d_ap = ad.mean(abs(ad.gather_rows(emb, a_idx) - ad.gather_rows(emb, p_idx)), axis=1)
    d_an = ad.mean(abs(ad.gather_rows(emb, [a_idx[s] for s in seg])
                       - ad.gather_rows(emb, n_idx)), axis=1)
    mean_an = ad.segment_mean(d_an, seg, len(triplets))
    return ad.mean(d_ap - mean_an + margin)


def stage2_train(student: DenseEncoder, data: CuratedDataset, calibration: QuantCalibration,
                 config: Stage2Config, audit=None):
    """Fine-tune the fake-quantized student with the semi-hard triplet loss.

    Returns the per-epoch metrics trace. With `audit` a list, every epoch
    appends (embeddings snapshot, triplet list) for independent recheck.
    """
    if len(data) == 0:
        raise ContractError("curated dataset is empty")
    inputs = np.vstack([data.rgb_matrix(), data.nonrgb_matrix()])

    student.set_trainable(True)
    fq = FakeQuantEncoder(student, calibration)
    state = OptimizerState(
        params=student.parameters(),
        schedule=ConstantSchedule(config.base_lr),
        weight_decay=config.weight_decay,
    )
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))

    trace = []
    for epoch in range(config.epochs):
        embeddings = fq.embed(inputs)
        if float(np.ptp(embeddings)) < COLLAPSE_TOL:
            raise CollapseError(
                f"model collapse at epoch {epoch}: all embeddings within {COLLAPSE_TOL}"
            )
        triplets = build_epoch_triplets(data.pseudo_labels, embeddings, config, rng)
        if audit is not None:
            audit.append((embeddings.copy(), triplets))

        epoch_losses = []
        for start in range(0, len(triplets), config.batch_size):
            batch = triplets[start:start + config.batch_size]
            if not batch:
                continue
            loss = _batched_loss(fq, inputs, batch, config.margin)
            value = float(loss.data)
            if not np.isfinite(value):
                raise DivergenceError(f"triplet loss became non-finite at epoch {epoch}")
            loss.backward()
            lr = adamw_step(state, epoch)
            epoch_losses.append(value)
        trace.append({
            "epoch": epoch,
            "loss": float(np.mean(epoch_losses)) if epoch_losses else 0.0,
            "triplets": len(triplets),
            "lr": config.base_lr,
        })
    return trace
