"""Inference: CAS fusion, video classification and proposal extraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import topk_mean_value
from .losses import select_top_count

__all__ = [
    "Proposal",
    "fuse_cas",
    "video_scores",
    "classify_video",
    "extract_proposals",
]


@dataclass(frozen=True)
class Proposal:
    """A scored temporal detection: class plus inclusive segment bounds."""

    class_index: int
    start_segment: int
    end_segment: int
    score: float

    def __post_init__(self):
        if not 0 <= self.start_segment <= self.end_segment:
            raise ValueError("proposal boundaries must satisfy 0 <= start <= end")
        if not np.isfinite(self.score):
            raise ValueError("proposal score must be finite")

    def interval(self) -> tuple[float, float]:
        """Continuous extent in segment units: [start, end + 1)."""
        return (float(self.start_segment), float(self.end_segment + 1))


def fuse_cas(cas_cls: np.ndarray, cas_loc: np.ndarray) -> np.ndarray:
    """Average the classification and localization activation sequences."""
    cas_cls = np.asarray(cas_cls, dtype=np.float64)
    cas_loc = np.asarray(cas_loc, dtype=np.float64)
    if cas_cls.shape != cas_loc.shape:
        raise ValueError("activation sequences must share a shape")
    return (cas_cls + cas_loc) / 2.0


def video_scores(
    cas: np.ndarray, labeled_count: int, r_fallback: float = 8.0
) -> tuple[np.ndarray, np.ndarray]:
    """Per-class top-k mean scores and their softmax probabilities."""
    cas = np.asarray(cas, dtype=np.float64)
    l, num_classes = cas.shape
    k = select_top_count(l, labeled_count, r_fallback)
    s = np.array([topk_mean_value(cas[:, n], k) for n in range(num_classes)])
    z = s - s.max()
    e = np.exp(z)
    return s, e / e.sum()


def classify_video(
    cas: np.ndarray,
    labeled_count: int,
    pmf_threshold: float = 0.1,
    r_fallback: float = 8.0,
) -> list[int]:
    """Classes whose probability mass reaches the threshold (inclusive)."""
    _, p = video_scores(cas, labeled_count, r_fallback)
    return [int(n) for n in np.flatnonzero(p >= pmf_threshold)]


def extract_proposals(
    cas: np.ndarray,
    labeled_count: int,
    score_threshold: float = 0.0,
    act_threshold: float = 0.0,
    r_fallback: float = 8.0,
) -> list[Proposal]:
    """Threshold the fused CAS into scored temporal proposals.

    Classes whose video score falls below ``score_threshold`` are discarded.
    For each kept class, maximal runs of segments with activation strictly
    above ``act_threshold`` become proposals scored by the mean activation
    inside the run. Proposals are ordered by class then start segment.
    """
    cas = np.asarray(cas, dtype=np.float64)
    s, _ = video_scores(cas, labeled_count, r_fallback)
    proposals: list[Proposal] = []
    for n in range(cas.shape[1]):
        if s[n] < score_threshold:
            continue
        active = cas[:, n] > act_threshold
        for start, end in _runs(active):
            score = float(cas[start : end + 1, n].mean())
            proposals.append(Proposal(n, start, end, score))
    return proposals


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of True as inclusive (start, end) index pairs."""
    padded = np.concatenate(([False], mask, [False]))
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    starts, ends = edges[0::2], edges[1::2] - 1
    return list(zip(starts.tolist(), ends.tolist()))
