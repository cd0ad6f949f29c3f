"""Metric-learning losses and their analytic gradients.

The structured band losses place confusing positives in the distance band
[alpha - beta, alpha] and confusing negatives in [alpha + m, alpha + m + beta];
inside its band a pair loss is flat with value exactly beta. Alongside them
live the baseline losses (triplet, N-pair, lifted structured), the
cross-modality hinge, and the softmax classification loss. Every gradient
in this module is validated by finite differences; at hinge kinks and
absolute-value kinks the subgradient is taken as zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .metricspace import ContractViolation, euclidean_sq, euclidean_sq_grad
from .mining import LabeledEmbedding, MarginParams, MinedSets

__all__ = [
    "LossValue",
    "triplet_loss",
    "triplet_loss_grads",
    "npair_loss",
    "npair_loss_grads",
    "lifted_struct_loss",
    "lifted_struct_loss_grads",
    "mmsl_pair_loss",
    "band_loss_values",
    "band_loss_slopes",
    "band_membership",
    "band_set_terms",
    "mmsl_set_losses",
    "cross_modality_loss",
    "cross_modality_terms",
    "hardest_triplet_terms",
    "mmsl_total",
    "classification_loss",
    "softmax_ce",
]


@dataclass
class LossValue:
    """A scalar loss with an optional per-term breakdown."""

    value: float
    term_breakdown: dict[str, float] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# baseline losses
# ---------------------------------------------------------------------------


def triplet_loss_grads(triplets, m: float):
    """Triplet loss mean(max(d(a,p) + m - d(a,n), 0)) with squared distances.

    Returns (LossValue, per-triplet gradients (ga, gp, gn)). Gradient flows
    only through triplets whose hinge is strictly active.
    """
    if not triplets:
        raise ContractViolation("triplet loss needs at least one triplet")
    total = 0.0
    grads = []
    n = len(triplets)
    for a, p, nneg in triplets:
        a = np.asarray(a, dtype=np.float64)
        p = np.asarray(p, dtype=np.float64)
        nneg = np.asarray(nneg, dtype=np.float64)
        arg = euclidean_sq(a, p) + m - euclidean_sq(a, nneg)
        if arg > 0.0:
            total += arg
            gap_a, gap_p = euclidean_sq_grad(a, p)
            gan_a, gan_n = euclidean_sq_grad(a, nneg)
            grads.append(((gap_a - gan_a) / n, gap_p / n, -gan_n / n))
        else:
            grads.append((np.zeros_like(a), np.zeros_like(p), np.zeros_like(nneg)))
    return LossValue(total / n), grads


def triplet_loss(triplets, m: float) -> LossValue:
    return triplet_loss_grads(triplets, m)[0]


def npair_loss_grads(anchors, positives):
    """N-pair loss over N (anchor, positive) sets, one per identity.

    For anchor i the positives of the other identities act as negatives:
    L = (1/N) sum_i log(1 + sum_{j != i} exp(a_i . p_j - a_i . p_i)).
    Computed with a log-sum-exp shift for stability. Returns
    (LossValue, d_anchors, d_positives).
    """
    A = np.asarray(anchors, dtype=np.float64)
    P = np.asarray(positives, dtype=np.float64)
    if A.ndim != 2 or P.shape != A.shape:
        raise ContractViolation("anchors and positives must be matching 2-D arrays")
    n = A.shape[0]
    if n < 2:
        raise ContractViolation("n-pair loss needs at least two identity sets")
    S = A @ P.T  # S[i, j] = a_i . p_j
    dA = np.zeros_like(A)
    dP = np.zeros_like(P)
    total = 0.0
    for i in range(n):
        x = S[i] - S[i, i]
        x[i] = -np.inf  # exclude the positive itself from the sum
        shift = max(0.0, float(np.max(x)))
        exps = np.exp(x - shift)
        exps[i] = 0.0
        z = math.exp(-shift) + float(np.sum(exps))
        total += shift + math.log(z)
        w = exps / z  # w[j] = dL_i / dS[i, j] for j != i
        wsum = float(np.sum(w))
        dA[i] += w @ P - wsum * P[i]
        dP += np.outer(w, A[i])
        dP[i] -= wsum * A[i]
    return LossValue(total / n), dA / n, dP / n


def npair_loss(anchors, positives) -> LossValue:
    return npair_loss_grads(anchors, positives)[0]


def lifted_struct_loss_grads(batch: list[LabeledEmbedding], beta: float):
    """Lifted structured loss with an unsquared hinge.

    Positive pairs are same-label pairs; the inner log sums exp(beta - d)
    over each endpoint's opposite-label links, with d the squared Euclidean
    distance. Returns (LossValue, gradient per batch entry).
    """
    if len(batch) < 2:
        raise ContractViolation("lifted structured loss needs at least two samples")
    E = np.stack([np.asarray(s.embedding, dtype=np.float64) for s in batch])
    labels = np.array([s.label == "positive" for s in batch])
    n = len(batch)
    diff = E[:, None, :] - E[None, :, :]
    D = np.einsum("ijk,ijk->ij", diff, diff)
    pairs = [
        (i, j)
        for i in range(n)
        for j in range(i + 1, n)
        if labels[i] == labels[j]
    ]
    links = [np.nonzero(labels != labels[i])[0] for i in range(n)]
    if not pairs:
        raise ContractViolation("lifted structured loss needs a same-label pair")
    if not any(len(l) for l in links):
        raise ContractViolation("lifted structured loss needs an opposite-label link")
    dE = np.zeros_like(E)
    total = 0.0
    for i, j in pairs:
        terms_i = np.exp(beta - D[i, links[i]])
        terms_j = np.exp(beta - D[j, links[j]])
        s = float(np.sum(terms_i) + np.sum(terms_j))
        arg = D[i, j] + math.log(s)
        if arg <= 0.0:
            continue
        total += arg
        scale = 1.0 / (2.0 * len(pairs))
        dE[i] += scale * 2.0 * diff[i, j]
        dE[j] -= scale * 2.0 * diff[i, j]
        for k, w in zip(links[i], terms_i):
            g = scale * (w / s) * (-2.0) * diff[i, k]
            dE[i] += g
            dE[k] -= g
        for l, w in zip(links[j], terms_j):
            g = scale * (w / s) * (-2.0) * diff[j, l]
            dE[j] += g
            dE[l] -= g
    return LossValue(total / (2.0 * len(pairs))), dE


def lifted_struct_loss(batch: list[LabeledEmbedding], beta: float) -> LossValue:
    return lifted_struct_loss_grads(batch, beta)[0]


# ---------------------------------------------------------------------------
# structured band losses
# ---------------------------------------------------------------------------


def _band_edges(positive: bool, params: MarginParams) -> tuple[float, float]:
    if positive:
        return params.alpha - params.beta, params.alpha
    return params.alpha + params.m, params.alpha + params.m + params.beta


def band_loss_values(d, positive: bool, params: MarginParams) -> np.ndarray:
    """Vectorized pair loss |d - lo| + |d - hi| for one band.

    On the closed band [lo, hi] the two absolute values cancel to the band
    width, so the stored beta is returned directly; this keeps the flat
    section bitwise equal to beta instead of accumulating rounding error.
    """
    lo, hi = _band_edges(positive, params)
    d = np.asarray(d, dtype=np.float64)
    inside = (d >= lo) & (d <= hi)
    return np.where(inside, params.beta, np.abs(d - lo) + np.abs(d - hi))


def band_loss_slopes(d, positive: bool, params: MarginParams) -> np.ndarray:
    """d(pair loss)/dd; zero inside the band and at kinks (sign(0) = 0)."""
    lo, hi = _band_edges(positive, params)
    d = np.asarray(d, dtype=np.float64)
    return np.sign(d - lo) + np.sign(d - hi)


def band_membership(d, positive: bool, params: MarginParams, eps: float = 0.05) -> np.ndarray:
    """Boolean mask of distances within the eps-padded target band."""
    lo, hi = _band_edges(positive, params)
    d = np.asarray(d, dtype=np.float64)
    return (d >= lo - eps) & (d <= hi + eps)


def mmsl_pair_loss(d: float, is_positive: bool, params: MarginParams) -> float:
    """Pair loss for a single confusing sample at distance ``d``.

    The minimum value is exactly beta, attained on the whole target band.
    """
    if not math.isfinite(d) or d < 0.0:
        raise ContractViolation(f"distance must be finite and non-negative, got {d}")
    return float(band_loss_values(d, is_positive, params))


def band_set_terms(
    distances: np.ndarray,
    pos_idx: np.ndarray,
    neg_idx: np.ndarray,
    params: MarginParams,
) -> tuple[float, float, np.ndarray]:
    """Set losses over mined index sets plus d(loss)/d(distances).

    Each side is the mean of its pair losses; an empty side contributes 0.
    """
    d = np.asarray(distances, dtype=np.float64)
    dd = np.zeros_like(d)
    l_p = 0.0
    l_n = 0.0
    if len(pos_idx):
        vals = band_loss_values(d[pos_idx], True, params)
        l_p = float(vals.mean())
        dd[pos_idx] += band_loss_slopes(d[pos_idx], True, params) / len(pos_idx)
    if len(neg_idx):
        vals = band_loss_values(d[neg_idx], False, params)
        l_n = float(vals.mean())
        dd[neg_idx] += band_loss_slopes(d[neg_idx], False, params) / len(neg_idx)
    return l_p, l_n, dd


def mmsl_set_losses(
    anchor,
    samples: list[LabeledEmbedding],
    mined: MinedSets,
    params: MarginParams,
    metric=euclidean_sq,
) -> tuple[float, float]:
    """Mean pair loss over the mined positive and negative sets.

    The mined sets are taken as given (they are recomputed every step by
    the caller); an empty set contributes zero.
    """
    anchor = np.asarray(anchor, dtype=np.float64)
    by_id = {s.sample_id: s for s in samples}
    l_p = 0.0
    if mined.confusing_positives:
        vals = [
            mmsl_pair_loss(metric(anchor, by_id[i].embedding), True, params)
            for i in mined.confusing_positives
        ]
        l_p = float(np.mean(vals))
    l_n = 0.0
    if mined.confusing_negatives:
        vals = [
            mmsl_pair_loss(metric(anchor, by_id[i].embedding), False, params)
            for i in mined.confusing_negatives
        ]
        l_n = float(np.mean(vals))
    return l_p, l_n


# ---------------------------------------------------------------------------
# cross-modality constraint
# ---------------------------------------------------------------------------


def cross_modality_terms(
    pos_r: np.ndarray,
    neg_r: np.ndarray,
    pos_t: np.ndarray,
    neg_t: np.ndarray,
    delta: float,
    positive_reduction: str = "max",
):
    """Cross-modality hinge and its gradients w.r.t. the distance lists.

    Both directions are summed: the worst positive of one modality must sit
    at least delta closer than the best negative of the other. With the
    "mean" reduction the positive side uses the mean distance instead of
    the worst one. Subgradients flow through the argmax/argmin elements
    only (first index on ties); an inactive hinge contributes nothing.
    """
    if positive_reduction not in ("max", "mean"):
        raise ContractViolation(
            f"positive_reduction must be 'max' or 'mean', got {positive_reduction!r}"
        )
    arrays = [np.asarray(a, dtype=np.float64) for a in (pos_r, neg_r, pos_t, neg_t)]
    for a in arrays:
        if a.size == 0:
            raise ContractViolation("cross-modality loss needs non-empty distance lists")
    pos_r, neg_r, pos_t, neg_t = arrays
    grads = [np.zeros_like(a) for a in arrays]
    total = 0.0
    for pos, neg, gpos, gneg in (
        (pos_r, neg_t, grads[0], grads[3]),
        (pos_t, neg_r, grads[2], grads[1]),
    ):
        j = int(np.argmin(neg))
        if positive_reduction == "max":
            i = int(np.argmax(pos))
            arg = pos[i] - neg[j] + delta
            if arg > 0.0:
                total += arg
                gpos[i] += 1.0
                gneg[j] -= 1.0
        else:
            arg = float(pos.mean()) - neg[j] + delta
            if arg > 0.0:
                total += arg
                gpos += 1.0 / pos.size
                gneg[j] -= 1.0
    return total, tuple(grads)


def cross_modality_loss(
    pos_r, neg_r, pos_t, neg_t, delta: float, positive_reduction: str = "max"
) -> float:
    """Scalar form of ``cross_modality_terms``."""
    total, _ = cross_modality_terms(pos_r, neg_r, pos_t, neg_t, delta, positive_reduction)
    return total


def hardest_triplet_terms(
    d_pos: np.ndarray, d_neg: np.ndarray, m: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """Anchor-level triplet baseline on precomputed distances.

    Every positive is paired with the hardest (closest) negative:
    mean_i max(d_pos[i] + m - min(d_neg), 0). Returns the loss and its
    gradients w.r.t. the two distance vectors.
    """
    d_pos = np.asarray(d_pos, dtype=np.float64)
    d_neg = np.asarray(d_neg, dtype=np.float64)
    if d_pos.size == 0 or d_neg.size == 0:
        raise ContractViolation("triplet baseline needs positives and negatives")
    j = int(np.argmin(d_neg))
    args = d_pos + m - d_neg[j]
    active = args > 0.0
    dd_pos = np.zeros_like(d_pos)
    dd_neg = np.zeros_like(d_neg)
    loss = float(np.where(active, args, 0.0).mean())
    dd_pos[active] = 1.0 / d_pos.size
    dd_neg[j] = -float(active.sum()) / d_pos.size
    return loss, dd_pos, dd_neg


# ---------------------------------------------------------------------------
# totals and classification
# ---------------------------------------------------------------------------


def mmsl_total(
    rgb_terms: tuple[float, float],
    t_terms: tuple[float, float],
    cross_term: float,
) -> LossValue:
    """Unweighted combination L_rgb + L_t + L_cross with a breakdown."""
    l_rgb = float(rgb_terms[0]) + float(rgb_terms[1])
    l_t = float(t_terms[0]) + float(t_terms[1])
    l_cross = float(cross_term)
    return LossValue(
        value=l_rgb + l_t + l_cross,
        term_breakdown={"L_rgb": l_rgb, "L_t": l_t, "L_cross": l_cross},
    )


def softmax_ce(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean two-way softmax cross-entropy and its gradient w.r.t. logits.

    ``targets`` holds class indices (0 = positive column, 1 = negative).
    """
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.int64)
    if z.ndim != 2 or z.shape[1] != 2:
        raise ContractViolation(f"expected (n, 2) logits, got shape {z.shape}")
    if t.shape != (z.shape[0],):
        raise ContractViolation("targets must align with logits")
    shifted = z - z.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    p = expz / expz.sum(axis=1, keepdims=True)
    n = z.shape[0]
    rows = np.arange(n)
    loss = float(-np.log(p[rows, t]).mean())
    dlogits = p.copy()
    dlogits[rows, t] -= 1.0
    return loss, dlogits / n


def classification_loss(logits, labels) -> LossValue:
    """Softmax cross-entropy over (pos_logit, neg_logit) pairs.

    ``labels`` are "positive"/"negative" strings or booleans (True means
    positive); the positive class is column 0.
    """
    z = np.asarray(logits, dtype=np.float64)
    targets = np.array(
        [0 if (l is True or l == "positive") else 1 for l in labels], dtype=np.int64
    )
    value, _ = softmax_ce(z, targets)
    return LossValue(value, {"L_cls": value})
