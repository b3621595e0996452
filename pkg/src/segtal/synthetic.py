"""Seeded synthetic corpora with planted actions and discriminative parts.

Each video is a sequence of noisy feature vectors. Background segments sit
around the origin; segments inside a planted action instance receive a
class prototype that mixes a shared "action" direction with a weaker
class-specific one, and a contiguous centered sub-span of each instance
additionally receives a strong class-unique discriminative direction. The
result reproduces, at desk scale, the qualitative behavior of activation
sequences trained with classification loss alone: the easily separable
discriminative sub-span dominates, while the rest of the instance is only
recoverable through segment supervision and propagation.

Instances never overlap and are separated by at least one background
segment. Everything is deterministic given the config seed; feature values
are quantized to float32 so an in-memory corpus is bit-identical to one
round-tripped through the on-disk format.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import CorpusRecord, FeatureSequence, GroundTruthInstance, LabelSet, sample_segment_labels
from .seeds import derive_seed

__all__ = ["SynthConfig", "generate", "corpus_stats"]

# Instance span bounds (segments) and the prototype mixing weight: action
# prototypes share most of their direction across classes so classification
# gradients concentrate on the discriminative sub-span.
_SPAN_RANGE = (8, 16)
_MIN_SPAN = 3
_PROTOTYPE_CLASS_WEIGHT = 0.4


@dataclass
class SynthConfig:
    """Generator settings; defaults give a corpus trainable in seconds."""

    num_videos: int = 60
    num_classes: int = 4
    feature_dim: int = 32
    segments_range: tuple[int, int] = (40, 80)
    instances_range: tuple[int, int] = (1, 3)
    discriminative_fraction: float = 0.3
    separation: float = 3.0
    noise_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_videos < 1 or self.num_classes < 1:
            raise ValueError("num_videos and num_classes must be positive")
        if self.feature_dim < 1 + 2 * self.num_classes:
            raise ValueError(
                "feature_dim must be at least 1 + 2 * num_classes to fit the planted directions"
            )
        if not 0 < self.discriminative_fraction <= 1:
            raise ValueError("discriminative_fraction must lie in (0, 1]")
        if self.separation <= 0:
            raise ValueError("separation must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        lo, hi = self.segments_range
        if not 1 <= lo <= hi:
            raise ValueError("segments_range must be an increasing positive pair")
        ilo, ihi = self.instances_range
        if not 1 <= ilo <= ihi:
            raise ValueError("instances_range must be an increasing positive pair")


def class_directions(config: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Prototype and discriminative direction per class, as (N, D) matrices.

    Directions are axis-aligned and orthonormal: axis 0 is the shared
    action direction, axes 1..N the class-specific prototype components and
    axes N+1..2N the discriminative components.
    """
    n, d = config.num_classes, config.feature_dim
    shared = math.sqrt(1.0 - _PROTOTYPE_CLASS_WEIGHT**2)
    prototypes = np.zeros((n, d))
    discriminative = np.zeros((n, d))
    for cls in range(n):
        prototypes[cls, 0] = shared
        prototypes[cls, 1 + cls] = _PROTOTYPE_CLASS_WEIGHT
        discriminative[cls, 1 + n + cls] = 1.0
    return prototypes, discriminative


def generate(
    config: SynthConfig,
    supervision: str = "one",
    label_seed: Optional[int] = None,
) -> list[CorpusRecord]:
    """Build a corpus of planted videos plus sampled segment labels.

    ``supervision`` is ``"one"``, ``"two"`` or ``"video"``; the first two
    sample segment labels from the planted instances, the last keeps only
    video-level labels. Features are independent of the supervision mode
    and of ``label_seed``, so the same corpus can be re-labeled freely.
    """
    if supervision not in ("one", "two", "video"):
        raise ValueError(f"unknown supervision mode {supervision!r}")
    prototypes, discriminative = class_directions(config)
    labels_root = label_seed if label_seed is not None else derive_seed(config.seed, "labels")

    records = []
    for i in range(config.num_videos):
        rng = np.random.default_rng(derive_seed(config.seed, f"video-{i}"))
        video_id = f"synth-{i:04d}"
        num_segments = int(rng.integers(config.segments_range[0], config.segments_range[1] + 1))
        instances = _plant_instances(rng, num_segments, config)

        x = config.noise_sigma * rng.standard_normal((num_segments, config.feature_dim))
        for inst in instances:
            span = slice(inst.start_segment, inst.end_segment + 1)
            x[span] += config.separation * prototypes[inst.class_index]
            disc_len = math.ceil(config.discriminative_fraction * inst.num_segments)
            disc_start = inst.start_segment + (inst.num_segments - disc_len) // 2
            x[disc_start : disc_start + disc_len] += (
                config.separation * discriminative[inst.class_index]
            )
        # Quantize to the on-disk precision so ingest round-trips bit-exactly.
        x = x.astype("<f4").astype(np.float64)

        if supervision == "video":
            y = np.zeros(config.num_classes, dtype=np.int64)
            for inst in instances:
                y[inst.class_index] = 1
            labels = LabelSet(y=y)
        else:
            labels = sample_segment_labels(
                instances,
                supervision,
                config.num_classes,
                derive_seed(labels_root, f"video-{i}"),
            )
        features = FeatureSequence(video_id=video_id, x=x)
        records.append(CorpusRecord(features, labels, tuple(instances)))
    return records


def _plant_instances(
    rng: np.random.Generator, num_segments: int, config: SynthConfig
) -> list[GroundTruthInstance]:
    """Place non-overlapping instances separated by at least one segment."""
    count = int(rng.integers(config.instances_range[0], config.instances_range[1] + 1))
    spans = [int(rng.integers(_SPAN_RANGE[0], _SPAN_RANGE[1] + 1)) for _ in range(count)]

    def occupied() -> int:
        return sum(spans) + max(0, len(spans) - 1)

    # Shrink the longest spans, then drop instances, until everything fits.
    while spans and occupied() > num_segments:
        longest = max(range(len(spans)), key=spans.__getitem__)
        if spans[longest] > _MIN_SPAN:
            spans[longest] -= 1
        else:
            spans.pop()
    if not spans:
        return []

    free = num_segments - occupied()
    gaps = rng.multinomial(free, np.full(len(spans) + 1, 1.0 / (len(spans) + 1)))
    classes = rng.integers(0, config.num_classes, size=len(spans))

    instances = []
    cursor = 0
    for idx, span in enumerate(spans):
        cursor += int(gaps[idx]) + (1 if idx > 0 else 0)
        instances.append(GroundTruthInstance(int(classes[idx]), cursor, cursor + span - 1))
        cursor += span
    return instances


def corpus_stats(records: list[CorpusRecord]) -> dict:
    """Aggregate statistics for experiment reports."""
    if not records:
        return {
            "num_videos": 0,
            "total_segments": 0,
            "class_instance_counts": {},
            "mean_instance_length": 0.0,
            "action_coverage": 0.0,
            "labeled_coverage": 0.0,
        }
    total_segments = sum(rec.features.num_segments for rec in records)
    counts: dict[int, int] = {}
    lengths = []
    action_segments = 0
    labeled_segments = 0
    for _, labels, instances in records:
        labeled_segments += labels.labeled_segment_count
        for inst in instances:
            counts[inst.class_index] = counts.get(inst.class_index, 0) + 1
            lengths.append(inst.num_segments)
            action_segments += inst.num_segments
    return {
        "num_videos": len(records),
        "total_segments": total_segments,
        "class_instance_counts": dict(sorted(counts.items())),
        "mean_instance_length": float(np.mean(lengths)) if lengths else 0.0,
        "action_coverage": action_segments / total_segments,
        "labeled_coverage": labeled_segments / total_segments,
    }
