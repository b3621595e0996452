"""Detection and classification evaluation: temporal IoU, average precision
at IoU thresholds, and report/export plumbing.

Detections are matched per class with the standard greedy protocol: sort
all proposals by descending score (ties by video id then start segment),
match each to the unmatched ground-truth instance of the same video with
the highest IoU at or above the threshold, and average precision at the
hit ranks over the number of ground-truth instances. Average precision is
uninterpolated.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .data import CorpusRecord, GroundTruthInstance
from .inference import Proposal, classify_video, extract_proposals, fuse_cas, video_scores
from .model import Parameters, forward_values

__all__ = [
    "temporal_iou",
    "instance_interval",
    "detection_map",
    "classification_map",
    "EvalReport",
    "VideoResult",
    "evaluate_corpus",
    "default_iou_grid",
    "export_proposals_csv",
    "export_cas_csv",
]


def temporal_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Intersection over union of two half-open intervals; 0 when disjoint."""
    (a0, a1), (b0, b1) = a, b
    if a1 <= a0 or b1 <= b0:
        raise ValueError("intervals must have positive length")
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    if inter == 0.0:
        return 0.0
    union = (a1 - a0) + (b1 - b0) - inter
    return inter / union


def instance_interval(inst: GroundTruthInstance) -> tuple[float, float]:
    """Continuous extent of a ground-truth instance in segment units."""
    return (float(inst.start_segment), float(inst.end_segment + 1))


def default_iou_grid() -> list[float]:
    """The standard reporting grid 0.1, 0.2, ..., 0.7."""
    return [round(0.1 * i, 10) for i in range(1, 8)]


def detection_map(
    proposals_by_video: Mapping[str, Sequence[Proposal]],
    gt_by_video: Mapping[str, Sequence[GroundTruthInstance]],
    iou_thresholds: Sequence[float],
) -> tuple[dict[float, float], dict[float, dict[int, float]]]:
    """Mean average precision per IoU threshold, plus per-class tables.

    Classes are those with at least one ground-truth instance; a class with
    ground truth but no proposals scores zero average precision.
    """
    classes = sorted(
        {inst.class_index for insts in gt_by_video.values() for inst in insts}
    )
    map_at_iou: dict[float, float] = {}
    per_class: dict[float, dict[int, float]] = {}
    for thr in iou_thresholds:
        if not 0.0 < thr <= 1.0:
            raise ValueError("IoU thresholds must lie in (0, 1]")
        table = {
            cls: _class_average_precision(cls, thr, proposals_by_video, gt_by_video)
            for cls in classes
        }
        per_class[thr] = table
        map_at_iou[thr] = float(np.mean(list(table.values()))) if table else 0.0
    return map_at_iou, per_class


def _class_average_precision(cls, thr, proposals_by_video, gt_by_video) -> float:
    preds = [
        (p.score, vid, p.start_segment, p)
        for vid, props in proposals_by_video.items()
        for p in props
        if p.class_index == cls
    ]
    preds.sort(key=lambda item: (-item[0], item[1], item[2]))

    gts = {
        vid: [instance_interval(inst) for inst in insts if inst.class_index == cls]
        for vid, insts in gt_by_video.items()
    }
    matched = {vid: [False] * len(spans) for vid, spans in gts.items()}
    total_gt = sum(len(spans) for spans in gts.values())
    if total_gt == 0:
        return 0.0

    hits = 0
    precision_sum = 0.0
    for rank, (_, vid, _, prop) in enumerate(preds, start=1):
        best_iou, best_j = 0.0, -1
        for j, span in enumerate(gts.get(vid, ())):
            if matched[vid][j]:
                continue
            iou = temporal_iou(prop.interval(), span)
            if iou > best_iou:  # strict: IoU ties keep the lowest index
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= thr:
            matched[vid][best_j] = True
            hits += 1
            precision_sum += hits / rank
    return precision_sum / total_gt


def classification_map(
    probabilities: np.ndarray, labels: np.ndarray
) -> tuple[float, dict[int, float]]:
    """Video-classification mAP from per-video class probabilities.

    Videos are ranked per class by probability (stable order on ties);
    average precision is computed over classes with at least one positive
    video. Raises if no class has a positive.
    """
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    if probabilities.shape != labels.shape or probabilities.ndim != 2:
        raise ValueError("probabilities and labels must be matching (M, N) matrices")
    positives = labels.sum(axis=0)
    classes = np.flatnonzero(positives)
    if classes.size == 0:
        raise ValueError("classification mAP undefined without any positive video")
    table: dict[int, float] = {}
    for n in classes:
        order = np.argsort(-probabilities[:, n], kind="stable")
        ranked = labels[order, n]
        hits = np.cumsum(ranked)
        ranks = np.arange(1, ranked.shape[0] + 1)
        table[int(n)] = float((hits[ranked == 1] / ranks[ranked == 1]).sum() / positives[n])
    return float(np.mean(list(table.values()))), table


@dataclass
class VideoResult:
    """Per-video inference artifacts kept for export and inspection."""

    video_id: str
    fused_cas: np.ndarray
    scores: np.ndarray
    probabilities: np.ndarray
    predicted_classes: list[int]
    proposals: list[Proposal]
    fps: float
    frames_per_segment: int


@dataclass
class EvalReport:
    """Detection mAP per IoU threshold plus classification mAP."""

    map_at_iou: dict[float, float]
    classification_map: float
    detection_ap: dict[float, dict[int, float]] = field(default_factory=dict)
    classification_ap: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "map_at_iou": {f"{thr:g}": v for thr, v in self.map_at_iou.items()},
            "classification_map": self.classification_map,
            "detection_ap": {
                f"{thr:g}": {str(c): v for c, v in table.items()}
                for thr, table in self.detection_ap.items()
            },
            "classification_ap": {str(c): v for c, v in self.classification_ap.items()},
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def evaluate_corpus(
    records: Sequence[CorpusRecord],
    params: Parameters,
    iou_thresholds: Optional[Sequence[float]] = None,
    pmf_threshold: float = 0.1,
    score_threshold: float = 0.0,
    act_threshold: float = 0.0,
    r_fallback: float = 8.0,
) -> tuple[EvalReport, list[VideoResult]]:
    """Run inference over a corpus and score it against its instances."""
    if iou_thresholds is None:
        iou_thresholds = default_iou_grid()
    results: list[VideoResult] = []
    proposals_by_video: dict[str, list[Proposal]] = {}
    gt_by_video: dict[str, list[GroundTruthInstance]] = {}
    prob_rows, label_rows = [], []
    for features, labels, instances in records:
        _, cas_cls, cas_loc = forward_values(features.x, params)
        fused = fuse_cas(cas_cls, cas_loc)
        q = labels.labeled_segment_count
        s, p = video_scores(fused, q, r_fallback)
        predicted = classify_video(fused, q, pmf_threshold, r_fallback)
        props = extract_proposals(fused, q, score_threshold, act_threshold, r_fallback)
        results.append(
            VideoResult(
                video_id=features.video_id,
                fused_cas=fused,
                scores=s,
                probabilities=p,
                predicted_classes=predicted,
                proposals=props,
                fps=features.fps,
                frames_per_segment=features.frames_per_segment,
            )
        )
        proposals_by_video[features.video_id] = props
        gt_by_video[features.video_id] = list(instances)
        prob_rows.append(p)
        label_rows.append(labels.y)

    map_at_iou, det_ap = detection_map(proposals_by_video, gt_by_video, iou_thresholds)
    cls_map, cls_ap = classification_map(np.array(prob_rows), np.array(label_rows))
    report = EvalReport(
        map_at_iou=map_at_iou,
        classification_map=cls_map,
        detection_ap=det_ap,
        classification_ap=cls_ap,
    )
    return report, results


def export_proposals_csv(path, results: Sequence[VideoResult]):
    """Proposals as ``video_id,class,start_s,end_s,score`` in seconds."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["video_id", "class", "start_s", "end_s", "score"])
        for res in results:
            seg_s = res.frames_per_segment / res.fps
            for p in res.proposals:
                writer.writerow(
                    [
                        res.video_id,
                        p.class_index,
                        p.start_segment * seg_s,
                        (p.end_segment + 1) * seg_s,
                        p.score,
                    ]
                )


def export_cas_csv(out_dir, results: Sequence[VideoResult]):
    """One CSV per video with the fused CAS timeline for external plotting."""
    os.makedirs(out_dir, exist_ok=True)
    for res in results:
        seg_s = res.frames_per_segment / res.fps
        num_classes = res.fused_cas.shape[1]
        with open(os.path.join(out_dir, f"{res.video_id}.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["segment", "time_s"] + [f"class_{n}" for n in range(num_classes)])
            for t in range(res.fused_cas.shape[0]):
                writer.writerow([t, t * seg_s] + list(res.fused_cas[t]))
