"""Seeded experiment orchestration: supervision re-labeling and the
loss-combination ablation grid.

All randomness descends from one root seed through named sub-seeds
(labels, init, batching, dropout), so rows of the ablation differ only in
which loss terms are active.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Optional, Sequence

from .data import CorpusRecord, LabelSet, sample_segment_labels
from .evaluation import EvalReport, default_iou_grid, evaluate_corpus
from .losses import LossWeights
from .model import Parameters, init_params
from .seeds import derive_seed
from .training import StepRecord, TrainConfig, train

__all__ = [
    "MODE_GRID",
    "SUPERVISION_MODES",
    "normalize_mode",
    "weights_for_mode",
    "relabel_records",
    "run_training",
    "run_ablation",
]

# The eight loss combinations, keyed by which extra terms join the
# classification baseline: (partial segment, sphere, propagation).
MODE_GRID: dict[str, tuple[bool, bool, bool]] = {
    "CL": (False, False, False),
    "CL+PSL": (True, False, False),
    "CL+SL": (False, True, False),
    "CL+PL": (False, False, True),
    "CL+PSL+SL": (True, True, False),
    "CL+PSL+PL": (True, False, True),
    "CL+SL+PL": (False, True, True),
    "CL+PSL+SL+PL": (True, True, True),
}

SUPERVISION_MODES = ("video-only", "one-segment", "two-segment")

_SAMPLER_MODE = {"one-segment": "one", "two-segment": "two"}


def normalize_mode(name: str) -> str:
    """Canonical grid key; accepts the ALL alias and any term order."""
    cleaned = name.strip().upper()
    if cleaned == "ALL":
        return "CL+PSL+SL+PL"
    terms = set(cleaned.split("+"))
    for key in MODE_GRID:
        if set(key.split("+")) == terms:
            return key
    raise ValueError(f"unknown ablation mode {name!r}")


def weights_for_mode(mode: str, base: LossWeights) -> LossWeights:
    """Zero out the weights of the terms absent from the given mode."""
    psl, sl, pl = MODE_GRID[normalize_mode(mode)]
    return replace(
        base,
        alpha=base.alpha if psl else 0.0,
        beta=base.beta if sl else 0.0,
        gamma=base.gamma if pl else 0.0,
    )


def relabel_records(
    records: Sequence[CorpusRecord], supervision: str, seed: int
) -> list[CorpusRecord]:
    """Replace each record's segment labels according to the supervision mode.

    ``video-only`` keeps the video-level multi-hot labels and drops segment
    labels; the segment modes resample from the ground-truth instances with
    a per-video seed derived from ``seed``.
    """
    if supervision not in SUPERVISION_MODES:
        raise ValueError(f"supervision must be one of {SUPERVISION_MODES}")
    out = []
    for features, labels, instances in records:
        if supervision == "video-only":
            new_labels = LabelSet(y=labels.y)
        else:
            new_labels = sample_segment_labels(
                instances,
                _SAMPLER_MODE[supervision],
                labels.num_classes,
                derive_seed(seed, f"labels/{supervision}/{features.video_id}"),
            )
        out.append(CorpusRecord(features, new_labels, instances))
    return out


def run_training(
    records: Sequence[CorpusRecord],
    seed: int,
    train_config: TrainConfig,
    num_classes: Optional[int] = None,
) -> tuple[Parameters, list[StepRecord]]:
    """Init from the derived init seed and train on the given records."""
    feature_dim = records[0].features.feature_dim
    if num_classes is None:
        num_classes = records[0].labels.num_classes
    params = init_params(feature_dim, num_classes, derive_seed(seed, "init"))
    config = replace(train_config, seed=derive_seed(seed, "train"))
    return train(records, params, config)


def run_ablation(
    records: Sequence[CorpusRecord],
    modes: Sequence[str],
    supervision_modes: Sequence[str],
    seed: int,
    train_config: TrainConfig,
    iou_thresholds: Optional[Sequence[float]] = None,
    pmf_threshold: float = 0.1,
    score_threshold: float = 0.0,
    act_threshold: float = 0.0,
) -> list[dict]:
    """Train and evaluate every (supervision, loss combination) cell.

    Evaluation runs on the training corpus itself: at desk scale the
    phenomenon of interest is how much of each planted instance the
    activation sequences recover, which is a property of the fit, not of
    generalization. Returns one row dict per cell.
    """
    if iou_thresholds is None:
        iou_thresholds = default_iou_grid()
    base_weights = train_config.loss_weights
    rows = []
    for supervision in supervision_modes:
        labeled = relabel_records(records, supervision, seed)
        for mode in modes:
            key = normalize_mode(mode)
            weights = weights_for_mode(key, base_weights)
            config = replace(train_config, loss_weights=weights)
            params, _ = run_training(labeled, seed, config)
            report, _ = evaluate_corpus(
                labeled,
                params,
                iou_thresholds,
                pmf_threshold=pmf_threshold,
                score_threshold=score_threshold,
                act_threshold=act_threshold,
                r_fallback=weights.r_fallback,
            )
            rows.append(_row(supervision, key, report))
    return rows


def _row(supervision: str, mode: str, report: EvalReport) -> dict:
    row = {"supervision": supervision, "mode": mode}
    for thr, value in report.map_at_iou.items():
        row[f"map@{thr:g}"] = value
    row["classification_map"] = report.classification_map
    return row
