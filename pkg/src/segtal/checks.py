"""Finite-difference verification of the training losses.

Central differences cannot cross the objective's kink points (ReLU zeros,
top-k selection boundaries, attention median boundaries, saturated
cosines), so instances are resampled until every such margin is safely
wider than the perturbation. The similarity matrix is computed once at the
evaluation point and held fixed, matching its constant role in the
gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import LabelSet
from .losses import (
    LossWeights,
    class_scores,
    classification_loss,
    partial_segment_loss,
    propagation_loss,
    similarity_matrix,
    sphere_loss,
    total_loss,
)
from .model import PARAM_FIELDS, ParameterNodes, Parameters, forward, init_params
from .seeds import derive_seed

__all__ = ["CheckInstance", "LOSS_NAMES", "sample_check_instance", "loss_grad_checks"]

LOSS_NAMES = ("classification", "partial_segment", "sphere", "propagation", "total")

# Margins comfortably above the largest value shift a +/- 1e-3 parameter
# perturbation can cause on these unit-scale instances.
_RELU_MARGIN = 1e-3
_GAP_MARGIN = 1e-4
_COS_MARGIN = 0.999
_NORM_MARGIN = 1e-2


@dataclass
class CheckInstance:
    """One random video plus parameters, safe for finite differencing."""

    x: np.ndarray
    labels: LabelSet
    params: Parameters


def sample_check_instance(
    seed: int,
    num_segments_range: tuple[int, int] = (6, 12),
    feature_dim: int = 5,
    num_classes: int = 3,
    max_attempts: int = 200,
) -> CheckInstance:
    """Draw an instance whose losses are smooth in an FD neighborhood."""
    for attempt in range(max_attempts):
        sub = derive_seed(seed, f"check-{attempt}")
        rng = np.random.default_rng(sub)
        l = int(rng.integers(num_segments_range[0], num_segments_range[1] + 1))
        x = rng.standard_normal((l, feature_dim))
        params = init_params(feature_dim, num_classes, derive_seed(sub, "params"))

        present = np.sort(rng.choice(num_classes, size=int(rng.integers(1, num_classes + 1)), replace=False))
        y = np.zeros(num_classes, dtype=np.int64)
        y[present] = 1
        pairs = set()
        for n in present:
            for t in rng.choice(l, size=int(rng.integers(1, 3)), replace=False):
                pairs.add((int(t), int(n)))
        labels = LabelSet(y=y, segment_labels=tuple(sorted(pairs)))

        if _margins_ok(x, labels, params):
            return CheckInstance(x=x, labels=labels, params=params)
    raise RuntimeError(f"no kink-free instance found after {max_attempts} attempts")


def _margins_ok(x: np.ndarray, labels: LabelSet, params: Parameters) -> bool:
    preact = x @ params.embed_w + params.embed_b
    if np.abs(preact).min() < _RELU_MARGIN:
        return False
    f = np.maximum(preact, 0.0)
    cas_cls = f @ params.cls_w + params.cls_b
    cas_loc = f @ params.loc_w + params.loc_b

    if not _column_gaps_ok(cas_cls):
        return False
    z = cas_loc - cas_loc.max(axis=0, keepdims=True)
    e = np.exp(z)
    a = e / e.sum(axis=0, keepdims=True)
    if not _column_gaps_ok(a):
        return False

    tau = np.median(a, axis=0, keepdims=True)
    attended = a * (a >= tau)
    for n in labels.present_classes():
        feat = f.T @ attended[:, n]
        norm = np.linalg.norm(feat)
        if norm < _NORM_MARGIN:
            return False
        for j in range(labels.num_classes):
            w = params.sphere_w[j]
            cos = feat @ w / (norm * np.linalg.norm(w))
            if abs(cos) > _COS_MARGIN:
                return False
    return True


def _column_gaps_ok(matrix: np.ndarray) -> bool:
    """Every consecutive gap of every sorted column exceeds the margin."""
    ordered = np.sort(matrix, axis=0)
    if ordered.shape[0] < 2:
        return True
    return bool(np.diff(ordered, axis=0).min() > _GAP_MARGIN)


def loss_grad_checks(
    seed: int,
    trials: int = 1,
    epsilon: float = 1e-6,
    num_segments_range: tuple[int, int] = (6, 12),
    feature_dim: int = 5,
    num_classes: int = 3,
    weights: LossWeights | None = None,
) -> dict[str, float]:
    """Max relative FD error per loss over freshly sampled instances."""
    if weights is None:
        weights = LossWeights()
    worst = {name: 0.0 for name in LOSS_NAMES}
    for trial in range(trials):
        inst = sample_check_instance(
            derive_seed(seed, f"trial-{trial}"),
            num_segments_range,
            feature_dim,
            num_classes,
        )
        param_dict = {f: getattr(inst.params, f) for f in PARAM_FIELDS}
        base_similarity = _base_similarity(inst, weights)
        for name in LOSS_NAMES:
            builder = _make_builder(name, inst, weights, base_similarity)
            err = ad.grad_check(builder, param_dict, epsilon)
            worst[name] = max(worst[name], err)
    return worst


def _base_similarity(inst: CheckInstance, weights: LossWeights) -> np.ndarray:
    f = np.maximum(inst.x @ inst.params.embed_w + inst.params.embed_b, 0.0)
    return similarity_matrix(f, weights.similarity_mode)


def _make_builder(name: str, inst: CheckInstance, weights: LossWeights, base_sim: np.ndarray):
    x, labels = inst.x, inst.labels

    def builder(nodes):
        pnodes = ParameterNodes(**{f: nodes[f] for f in PARAM_FIELDS})
        cas = forward(x, pnodes)
        if name == "classification":
            scores = class_scores(
                cas.cas_cls, labels.labeled_segment_count, weights.r_fallback
            )
            return classification_loss(scores, labels.y, weights.normalize_y)
        if name == "partial_segment":
            return partial_segment_loss(cas.cas_loc, labels.segment_labels)
        if name == "sphere":
            a = ad.softmax_over_time(cas.cas_loc)
            return sphere_loss(
                cas.f, a, labels.y, pnodes.sphere_w, weights.margin_m, weights.psi_literal
            )
        if name == "propagation":
            return propagation_loss(cas.cas_loc, base_sim, weights.prop_normalize)
        if name == "total":
            loss, _ = total_loss(cas, labels, weights, pnodes.sphere_w, similarity=base_sim)
            return loss
        raise ValueError(f"unknown loss {name!r}")

    return builder
