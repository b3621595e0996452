"""Training objective: classification, partial segment, sphere and
propagation losses over one video's activation sequences.

The total objective is the classification loss plus three weighted terms
from the localization branch:

- a partial segment loss, cross entropy restricted to the sparsely labeled
  segments (loss sampling), with a dense least-squares variant kept as an
  ablation baseline;
- a sphere loss, an angular-margin softmax over attention-aggregated
  class-wise feature vectors that pulls same-class features together;
- a propagation loss, a graph smoothness regularizer that spreads
  localization scores from labeled segments to feature-similar ones via a
  segment similarity matrix.

The similarity matrix and the attention mask are treated as constants
during backpropagation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .data import LabelSet
from .model import CasPair

logger = logging.getLogger(__name__)

__all__ = [
    "LossWeights",
    "select_top_count",
    "class_scores",
    "classification_loss",
    "partial_segment_loss",
    "l2_segment_loss",
    "attention",
    "classwise_feature",
    "angular_margin",
    "sphere_loss",
    "similarity_matrix",
    "propagation_loss",
    "total_loss",
]

SIMILARITY_MODES = ("normalized-clamped", "literal")


@dataclass
class LossWeights:
    """Trade-off weights and knobs for the combined objective.

    ``alpha``, ``beta`` and ``gamma`` weight the partial segment, sphere and
    propagation terms. ``r_fallback`` replaces the labeled-count rule for
    the top-k ratio when a video has no labeled segments. ``margin_m`` is
    the integer angular-margin order.
    """

    alpha: float = 0.1
    beta: float = 1e-4
    gamma: float = 0.02
    r_fallback: float = 8.0
    margin_m: int = 4
    similarity_mode: str = "normalized-clamped"
    prop_normalize: bool = True
    psi_literal: bool = False
    normalize_y: bool = False
    use_l2_segment: bool = False

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.margin_m < 1 or int(self.margin_m) != self.margin_m:
            raise ValueError("margin_m must be a positive integer")
        if self.r_fallback < 1:
            raise ValueError("r_fallback must be >= 1")
        if self.similarity_mode not in SIMILARITY_MODES:
            raise ValueError(f"similarity_mode must be one of {SIMILARITY_MODES}")


def select_top_count(num_segments: int, labeled_count: int, r_fallback: float = 8.0) -> int:
    """Number of top segments to average: k = max(1, floor(l / r)).

    The selection ratio r is twice the labeled-segment count when labels
    exist, otherwise ``r_fallback``; the floor is clamped so short videos
    keep at least one selected segment.
    """
    r = 2.0 * labeled_count if labeled_count >= 1 else float(r_fallback)
    return max(1, int(math.floor(num_segments / r)))


def class_scores(cas: ad.Tensor, labeled_count: int, r_fallback: float = 8.0) -> ad.Tensor:
    """Per-class video scores: top-k mean over time of each CAS column."""
    l, num_classes = cas.shape
    k = select_top_count(l, labeled_count, r_fallback)
    rows = np.arange(l)
    cols = [ad.topk_mean(ad.gather(cas, rows, np.full(l, n)), k) for n in range(num_classes)]
    return ad.stack(cols)


def classification_loss(scores: ad.Tensor, y: np.ndarray, normalize_y: bool = False) -> ad.Tensor:
    """Multi-hot cross entropy over the softmax of the video scores.

    Averaged over all classes; ``normalize_y`` additionally divides the
    multi-hot target by the number of present classes. A video without any
    labels contributes zero with a warning.
    """
    y = np.asarray(y)
    present = np.flatnonzero(y)
    if present.size == 0:
        logger.warning("classification_loss called with an all-zero label vector")
        return ad.Tensor(0.0)
    log_p = ad.log_softmax_over_classes(scores)
    scale = 1.0 / (y.shape[0] * (present.size if normalize_y else 1))
    return ad.mul(ad.neg(ad.sum_all(ad.take(log_p, present))), scale)


def partial_segment_loss(cas_loc: ad.Tensor, labeled: Sequence[tuple[int, int]]) -> ad.Tensor:
    """Cross entropy of the time-normalized CAS at the labeled segments only.

    The CAS is normalized per class across time; unlabeled positions enter
    solely through that normalization, so the loss samples the supervision
    instead of forcing unlabeled segments toward zero.
    """
    if len(labeled) == 0:
        return ad.Tensor(0.0)
    rows = np.array([t for t, _ in labeled])
    cols = np.array([n for _, n in labeled])
    log_a = ad.log_softmax_over_time(cas_loc)
    return ad.neg(ad.sum_all(ad.gather(log_a, rows, cols)))


def l2_segment_loss(cas_loc: ad.Tensor, dense_labels: np.ndarray) -> ad.Tensor:
    """Dense least-squares baseline: sum of (CAS - label)^2 over all cells."""
    dense_labels = np.asarray(dense_labels, dtype=np.float64)
    if dense_labels.shape != cas_loc.shape:
        raise ValueError("dense labels must match the CAS shape")
    diff = ad.sub(cas_loc, dense_labels)
    return ad.sum_all(ad.mul(diff, diff))


def attention(a: ad.Tensor) -> ad.Tensor:
    """Keep per-class normalized CAS values at or above the column median.

    The comparison mask is a constant in the graph; gradients flow only
    through the kept values.
    """
    tau = np.median(a.data, axis=0, keepdims=True)
    mask = (a.data >= tau).astype(np.float64)
    return ad.mul(a, mask)


def classwise_feature(f: ad.Tensor, attention_col: ad.Tensor) -> ad.Tensor:
    """Attention-weighted sum of segment features: f^T @ attention column."""
    return ad.matmul(ad.transpose(f), attention_col)


def angular_margin(theta: float, m: int, literal: bool = False) -> float:
    """Angular-margin transform of a plain angle, clamped to [0, pi].

    Out-of-range angles are clamped with a warning; see
    :func:`segtal.autodiff.angular_margin_value` for the formula.
    """
    if not 0.0 <= theta <= math.pi:
        logger.warning("angle %.6f outside [0, pi]; clamping", theta)
        theta = min(max(theta, 0.0), math.pi)
    return ad.angular_margin_value(theta, m, literal)


# Cosines are clamped just inside [-1, 1] so arccos stays differentiable.
_COS_LIMIT = 1.0 - 1e-12


def sphere_loss(
    f: ad.Tensor,
    a: ad.Tensor,
    y: np.ndarray,
    sphere_w: ad.Tensor,
    margin_m: int = 4,
    psi_literal: bool = False,
) -> ad.Tensor:
    """Angular-margin softmax over class-wise aggregated features.

    For each present class the high-attention region of the normalized CAS
    aggregates segment features into one vector; its angle to the matching
    class weight row is pushed below the angles to all other rows by an
    integer margin. Per-class losses are averaged over the present classes.
    The loss depends only on the directions of the weight rows.
    """
    y = np.asarray(y)
    present = np.flatnonzero(y)
    if present.size == 0:
        logger.warning("sphere_loss called with an all-zero label vector")
        return ad.Tensor(0.0)
    num_classes, dim = sphere_w.shape
    attn = attention(a)
    l = f.shape[0]
    rows_l = np.arange(l)
    rows_d = np.arange(dim)

    row_norms = []
    row_nodes = []
    for j in range(num_classes):
        w_j = ad.gather(sphere_w, np.full(dim, j), rows_d)
        row_nodes.append(w_j)
        row_norms.append(ad.sqrt(ad.sum_all(ad.mul(w_j, w_j))))

    terms = []
    skipped = 0
    for n in present:
        col = ad.gather(attn, rows_l, np.full(l, n))
        feat = classwise_feature(f, col)
        feat_norm = ad.sqrt(ad.sum_all(ad.mul(feat, feat)))
        if feat_norm.data == 0.0:
            logger.warning("sphere_loss: zero aggregated feature for class %d; skipped", n)
            skipped += 1
            continue
        logits = []
        target = None
        for j in range(num_classes):
            dot = ad.sum_all(ad.mul(row_nodes[j], feat))
            cos_j = ad.clip(ad.div(dot, ad.mul(row_norms[j], feat_norm)), -_COS_LIMIT, _COS_LIMIT)
            if j == n:
                theta = ad.arccos(cos_j)
                target = ad.mul(feat_norm, ad.angular_margin(theta, margin_m, psi_literal))
            else:
                logits.append(ad.mul(feat_norm, cos_j))
        z = ad.stack([target] + logits)
        terms.append(ad.sub(ad.logsumexp(z), target))

    if not terms:
        return ad.Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / (present.size - skipped))


def similarity_matrix(f_values: np.ndarray, mode: str = "normalized-clamped") -> np.ndarray:
    """Pairwise segment similarity from the embedded features.

    ``normalized-clamped`` (default) is the cosine matrix with negatives
    clamped to zero and a unit diagonal, guaranteeing a non-negative
    smoothness regularizer whose scale is independent of the feature norm.
    ``literal`` is the raw Gram matrix f f^T. Both are exactly symmetric
    and are used as constants by the propagation loss.
    """
    f_values = np.asarray(f_values, dtype=np.float64)
    if mode == "literal":
        s = f_values @ f_values.T
        return (s + s.T) / 2.0
    if mode != "normalized-clamped":
        raise ValueError(f"similarity mode must be one of {SIMILARITY_MODES}")
    norms = np.linalg.norm(f_values, axis=1, keepdims=True)
    unit = np.divide(f_values, norms, out=np.zeros_like(f_values), where=norms > 0)
    s = unit @ unit.T
    s = (s + s.T) / 2.0
    s = np.clip(s, 0.0, 1.0)
    np.fill_diagonal(s, 1.0)
    return s


def propagation_loss(
    cas_loc: ad.Tensor, similarity: np.ndarray, normalize: bool = True
) -> ad.Tensor:
    """Similarity-weighted squared differences of CAS rows across time.

    Segments that look alike are pushed toward the same localization score,
    which propagates supervision from labeled segments to similar unlabeled
    ones. ``normalize`` divides by l^2 so the weight of this term does not
    grow with video length. Gradients flow through the CAS only.
    """
    raw = ad.pairwise_smoothness(cas_loc, similarity)
    if normalize:
        l = cas_loc.shape[0]
        return ad.mul(raw, 1.0 / float(l * l))
    return raw


def total_loss(
    cas: CasPair,
    labels: LabelSet,
    weights: LossWeights,
    sphere_w: Optional[ad.Tensor] = None,
    similarity: Optional[np.ndarray] = None,
) -> tuple[ad.Tensor, dict[str, float]]:
    """Combined objective plus a per-term breakdown for logging.

    Terms with zero weight are skipped entirely. ``sphere_w`` is the class
    weight matrix node and is required while the sphere term is active.
    When the propagation term is active and ``similarity`` is not supplied,
    the matrix is computed from the current embedded feature values (it is
    a constant with respect to the gradient either way).
    """
    l = cas.cas_loc.shape[0]
    scores = class_scores(cas.cas_cls, labels.labeled_segment_count, weights.r_fallback)
    loss = classification_loss(scores, labels.y, weights.normalize_y)
    breakdown = {"classification": float(loss.data)}

    breakdown["partial_segment"] = 0.0
    if weights.alpha > 0:
        if weights.use_l2_segment:
            seg = l2_segment_loss(cas.cas_loc, labels.dense_mask(l))
        else:
            seg = partial_segment_loss(cas.cas_loc, labels.segment_labels)
        breakdown["partial_segment"] = float(seg.data)
        loss = ad.add(loss, ad.mul(seg, weights.alpha))

    breakdown["sphere"] = 0.0
    if weights.beta > 0:
        if sphere_w is None:
            raise ValueError("sphere_w is required while the sphere weight is non-zero")
        a = ad.softmax_over_time(cas.cas_loc)
        sph = sphere_loss(cas.f, a, labels.y, sphere_w, weights.margin_m, weights.psi_literal)
        breakdown["sphere"] = float(sph.data)
        loss = ad.add(loss, ad.mul(sph, weights.beta))

    breakdown["propagation"] = 0.0
    if weights.gamma > 0:
        if similarity is None:
            similarity = similarity_matrix(cas.f.data, weights.similarity_mode)
        prop = propagation_loss(cas.cas_loc, similarity, weights.prop_normalize)
        breakdown["propagation"] = float(prop.data)
        loss = ad.add(loss, ad.mul(prop, weights.gamma))

    breakdown["total"] = float(loss.data)
    return loss, breakdown
