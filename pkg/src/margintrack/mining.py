"""Confusing-sample mining.

A positive sample is confusing when it sits farther from the anchor than
alpha; a negative is confusing when it sits closer than alpha + m. Both
inequalities are strict, so samples exactly on a threshold are left alone.
``mine_oracle`` is a deliberately naive second implementation kept as the
reference the vectorized path is tested against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .metricspace import ContractViolation, euclidean_sq

LABELS = ("positive", "negative")


@dataclass(frozen=True)
class MarginParams:
    """Margin geometry (alpha, beta, m, delta) shared across the package."""

    alpha: float = 1.6
    beta: float = 0.1
    m: float = 0.2
    delta: float = 0.2

    def __post_init__(self) -> None:
        vals = (self.alpha, self.beta, self.m, self.delta)
        if not all(math.isfinite(v) for v in vals):
            raise ContractViolation(f"margin parameters must be finite, got {vals}")
        if self.alpha <= 0.0:
            raise ContractViolation(f"alpha must be positive, got {self.alpha}")
        if self.beta < 0.0:
            raise ContractViolation(f"beta must be non-negative, got {self.beta}")
        if self.alpha <= self.beta:
            raise ContractViolation(
                f"alpha must exceed beta, got alpha={self.alpha} beta={self.beta}"
            )
        if self.m < 0.0:
            raise ContractViolation(f"m must be non-negative, got {self.m}")
        if self.delta < 0.0:
            raise ContractViolation(f"delta must be non-negative, got {self.delta}")


@dataclass(frozen=True)
class LabeledEmbedding:
    """An embedded sample with its label, modality, and stable id."""

    embedding: np.ndarray
    label: str
    modality: str
    sample_id: int

    def __post_init__(self) -> None:
        if self.label not in LABELS:
            raise ContractViolation(f"label must be one of {LABELS}, got {self.label!r}")


@dataclass
class MinedSets:
    """Sample ids of the confusing positives and negatives for one anchor."""

    confusing_positives: list[int]
    confusing_negatives: list[int]
    modality: str


def mine_from_distances(
    distances: np.ndarray, positive_mask: np.ndarray, params: MarginParams
) -> tuple[np.ndarray, np.ndarray]:
    """Index-level mining on a precomputed distance vector.

    Returns (positions of confusing positives, positions of confusing
    negatives) in input order. This is the fast path shared by ``mine``
    and the trainer, which computes distances once per frame.
    """
    d = np.asarray(distances, dtype=np.float64)
    mask = np.asarray(positive_mask, dtype=bool)
    if d.shape != mask.shape:
        raise ContractViolation("distances and labels must align")
    pos_idx = np.nonzero(mask & (d > params.alpha))[0]
    neg_idx = np.nonzero(~mask & (d < params.alpha + params.m))[0]
    return pos_idx, neg_idx


def _check_batch(anchor, samples) -> str:
    """Returns the batch's shared modality; an empty batch defaults to rgb."""
    if not samples:
        return "rgb"
    modality = samples[0].modality
    for s in samples:
        if s.modality != modality:
            raise ContractViolation(
                f"mixed modalities in one batch: {modality!r} vs {s.modality!r}"
            )
    return modality


def mine(anchor, samples: list[LabeledEmbedding], params: MarginParams, metric=euclidean_sq) -> MinedSets:
    """Mine the confusing sets for one anchor.

    Selection keeps input order and uses strict inequalities on both sides.
    """
    modality = _check_batch(anchor, samples)
    anchor = np.asarray(anchor, dtype=np.float64)
    distances = np.array([metric(anchor, s.embedding) for s in samples])
    mask = np.array([s.label == "positive" for s in samples])
    pos_idx, neg_idx = mine_from_distances(distances, mask, params)
    ids = [s.sample_id for s in samples]
    return MinedSets(
        confusing_positives=[ids[i] for i in pos_idx],
        confusing_negatives=[ids[i] for i in neg_idx],
        modality=modality,
    )


def mine_oracle(anchor, samples: list[LabeledEmbedding], params: MarginParams, metric=euclidean_sq) -> MinedSets:
    """Reference mining: a literal per-sample scan of the definitions."""
    modality = _check_batch(anchor, samples)
    confusing_positives = []
    confusing_negatives = []
    for s in samples:
        d = metric(anchor, s.embedding)
        if s.label == "positive":
            if d > params.alpha:
                confusing_positives.append(s.sample_id)
        else:
            if d < params.alpha + params.m:
                confusing_negatives.append(s.sample_id)
    return MinedSets(confusing_positives, confusing_negatives, modality)
