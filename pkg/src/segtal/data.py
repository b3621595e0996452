"""Video features, labels, annotation metrics and corpus file formats.

A corpus is a list of :class:`CorpusRecord` tuples: per-segment features,
the label set used for training, and the ground-truth action instances used
for label sampling and evaluation. On disk a corpus is a JSON manifest next
to one raw feature file per video (little-endian float32, row-major, no
header; the shape comes from the manifest).
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

FEATURE_DTYPE = np.dtype("<f4")

__all__ = [
    "FeatureSequence",
    "GroundTruthInstance",
    "LabelSet",
    "AnnotationLog",
    "CorpusRecord",
    "CorpusError",
    "sample_segment_labels",
    "seconds_to_segment",
    "annotation_ratio",
    "aggregate_annotation_ratio",
    "read_annotation_logs",
    "write_annotation_logs",
    "ingest_corpus",
    "write_corpus",
]


@dataclass
class FeatureSequence:
    """Precomputed per-segment features for one untrimmed video.

    ``x`` has one row per segment; a segment is a fixed block of
    ``frames_per_segment`` consecutive frames.
    """

    video_id: str
    x: np.ndarray
    fps: float = 30.0
    frames_per_segment: int = 16

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2 or self.x.shape[0] < 1 or self.x.shape[1] < 1:
            raise ValueError(f"{self.video_id}: features must be a non-empty matrix")
        if not np.isfinite(self.x).all():
            raise ValueError(f"{self.video_id}: features contain non-finite values")
        if self.fps <= 0 or self.frames_per_segment < 1:
            raise ValueError(f"{self.video_id}: invalid timing metadata")

    @property
    def num_segments(self) -> int:
        return self.x.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.x.shape[1]

    def segment_seconds(self) -> float:
        """Duration of one segment in seconds."""
        return self.frames_per_segment / self.fps


@dataclass(frozen=True)
class GroundTruthInstance:
    """One action occurrence: class plus inclusive segment boundaries."""

    class_index: int
    start_segment: int
    end_segment: int

    def __post_init__(self):
        if self.class_index < 0:
            raise ValueError("class_index must be non-negative")
        if not 0 <= self.start_segment <= self.end_segment:
            raise ValueError("instance boundaries must satisfy 0 <= start <= end")

    @property
    def num_segments(self) -> int:
        return self.end_segment - self.start_segment + 1


@dataclass(frozen=True)
class LabelSet:
    """Video-level multi-hot labels plus sparse per-segment labels.

    ``segment_labels`` is a sorted tuple of ``(t, n)`` pairs marking segment
    ``t`` as containing an action of class ``n``. Every class appearing in a
    segment label must also be set in ``y``.
    """

    y: np.ndarray
    segment_labels: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.int64)
        if y.ndim != 1 or not np.isin(y, (0, 1)).all():
            raise ValueError("y must be a multi-hot vector")
        object.__setattr__(self, "y", y)
        pairs = tuple(sorted({(int(t), int(n)) for t, n in self.segment_labels}))
        object.__setattr__(self, "segment_labels", pairs)
        for t, n in pairs:
            if t < 0:
                raise ValueError(f"segment label t={t} is negative")
            if not 0 <= n < y.shape[0]:
                raise ValueError(f"segment label class {n} out of range")
            if y[n] != 1:
                raise ValueError(f"class {n} labeled at segment {t} but y[{n}]=0")

    @property
    def num_classes(self) -> int:
        return self.y.shape[0]

    @property
    def labeled_segment_count(self) -> int:
        """Number of distinct labeled segments (label budget Q)."""
        return len({t for t, _ in self.segment_labels})

    def present_classes(self) -> np.ndarray:
        return np.flatnonzero(self.y)

    def dense_mask(self, num_segments: int) -> np.ndarray:
        """Segment labels as a dense (l, N) 0/1 matrix."""
        u = np.zeros((num_segments, self.num_classes), dtype=np.float64)
        for t, n in self.segment_labels:
            if t >= num_segments:
                raise ValueError(f"segment label t={t} >= l={num_segments}")
            u[t, n] = 1.0
        return u


@dataclass(frozen=True)
class AnnotationLog:
    """Measured annotation effort for one video."""

    video_id: str
    annotation_seconds: float
    duration_seconds: float

    def __post_init__(self):
        if self.annotation_seconds < 0:
            raise ValueError("annotation time must be non-negative")
        if self.duration_seconds <= 0:
            raise ValueError("video duration must be positive")


class CorpusRecord(NamedTuple):
    features: FeatureSequence
    labels: LabelSet
    instances: tuple[GroundTruthInstance, ...]


class CorpusError(ValueError):
    """Raised when a corpus file fails validation; carries the video id."""


# ---------------------------------------------------------------------------
# segment-label sampling


def sample_segment_labels(
    instances: Sequence[GroundTruthInstance],
    mode: str,
    num_classes: int,
    rng_seed: int,
) -> LabelSet:
    """Sample sparse segment labels from boundary-annotated instances.

    ``mode="one"`` labels exactly one segment, drawn uniformly from each
    instance. ``mode="two"`` draws two distinct segments uniformly without
    replacement (a single-segment instance yields the same segment twice)
    and labels the whole inclusive span between them, since every segment
    between two labeled ones inside the same instance is also part of it.
    Deterministic given ``rng_seed``.
    """
    if mode not in ("one", "two"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    rng = np.random.default_rng(rng_seed)
    y = np.zeros(num_classes, dtype=np.int64)
    pairs: set[tuple[int, int]] = set()
    for inst in instances:
        if inst.class_index >= num_classes:
            raise ValueError(f"instance class {inst.class_index} out of range")
        y[inst.class_index] = 1
        span = inst.num_segments
        if mode == "one":
            t = int(rng.integers(inst.start_segment, inst.end_segment + 1))
            pairs.add((t, inst.class_index))
        else:
            if span == 1:
                lo = hi = inst.start_segment
            else:
                offsets = rng.choice(span, size=2, replace=False)
                lo, hi = sorted(inst.start_segment + int(o) for o in offsets)
            for t in range(lo, hi + 1):
                pairs.add((t, inst.class_index))
    return LabelSet(y=y, segment_labels=tuple(sorted(pairs)))


def seconds_to_segment(
    time_s: float,
    fps: float = 30.0,
    frames_per_segment: int = 16,
    num_segments: int | None = None,
) -> int:
    """Segment index containing the first frame of the given second.

    When ``num_segments`` is given, out-of-range results are clamped to the
    last segment with a warning.
    """
    if time_s < 0:
        raise ValueError("time must be non-negative")
    idx = int(math.floor(time_s * fps / frames_per_segment))
    if num_segments is not None and idx >= num_segments:
        logger.warning(
            "time %.3fs maps to segment %d >= l=%d; clamping", time_s, idx, num_segments
        )
        idx = num_segments - 1
    return idx


# ---------------------------------------------------------------------------
# annotation-cost metric


def annotation_ratio(log: AnnotationLog) -> float:
    """Annotation-duration ratio: annotation seconds over video seconds."""
    return log.annotation_seconds / log.duration_seconds


def aggregate_annotation_ratio(logs: Iterable[AnnotationLog]) -> float:
    """Corpus-level ratio: total annotation time over total duration."""
    logs = list(logs)
    if not logs:
        raise ValueError("cannot aggregate an empty set of annotation logs")
    total_a = sum(log.annotation_seconds for log in logs)
    total_d = sum(log.duration_seconds for log in logs)
    return total_a / total_d


def read_annotation_logs(path) -> list[AnnotationLog]:
    """Read a CSV with header ``video_id,t_a,l_dur``."""
    logs = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = {"video_id", "t_a", "l_dur"}
        if reader.fieldnames is None or not expected.issubset(reader.fieldnames):
            raise ValueError(f"annotation log must have columns {sorted(expected)}")
        for row in reader:
            logs.append(
                AnnotationLog(
                    video_id=row["video_id"],
                    annotation_seconds=float(row["t_a"]),
                    duration_seconds=float(row["l_dur"]),
                )
            )
    return logs


def write_annotation_logs(path, logs: Iterable[AnnotationLog]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["video_id", "t_a", "l_dur"])
        for log in logs:
            writer.writerow([log.video_id, log.annotation_seconds, log.duration_seconds])


# ---------------------------------------------------------------------------
# corpus ingestion and export


def _require(condition: bool, video_id: str, message: str):
    if not condition:
        raise CorpusError(f"{video_id}: {message}")


def ingest_corpus(manifest_path, num_classes: int | None = None) -> list[CorpusRecord]:
    """Load a corpus from a JSON manifest, validating every record.

    The manifest is a JSON array of records
    ``{video_id, feature_file, l, D, fps, labels="video"/"segments"/"instances"}``;
    feature files are raw little-endian float32 matrices resolved relative
    to the manifest. ``num_classes`` overrides the inferred class count
    (1 + maximum class index seen anywhere in the manifest).
    """
    manifest_path = os.fspath(manifest_path)
    with open(manifest_path) as fh:
        entries = json.load(fh)
    if not isinstance(entries, list):
        raise CorpusError("manifest must be a JSON array of records")
    base_dir = os.path.dirname(os.path.abspath(manifest_path))

    if num_classes is None:
        max_class = -1
        for entry in entries:
            labels = entry.get("labels", {})
            classes = list(labels.get("video", []))
            classes += [seg["n"] for seg in labels.get("segments", [])]
            classes += [inst["n"] for inst in labels.get("instances", [])]
            if classes:
                max_class = max(max_class, max(int(n) for n in classes))
        num_classes = max_class + 1

    records = []
    for entry in entries:
        vid = str(entry.get("video_id", "<missing video_id>"))
        for key in ("video_id", "feature_file", "l", "D"):
            _require(key in entry, vid, f"manifest record missing {key!r}")
        l, dim = int(entry["l"]), int(entry["D"])
        _require(l >= 1 and dim >= 1, vid, f"invalid shape l={l}, D={dim}")

        feature_path = os.path.join(base_dir, entry["feature_file"])
        _require(os.path.exists(feature_path), vid, f"feature file missing: {feature_path}")
        raw = np.fromfile(feature_path, dtype=FEATURE_DTYPE)
        _require(
            raw.size == l * dim,
            vid,
            f"feature file holds {raw.size} values, expected {l}x{dim}={l * dim}",
        )
        x = raw.reshape(l, dim).astype(np.float64)
        _require(bool(np.isfinite(x).all()), vid, "features contain non-finite values")
        features = FeatureSequence(
            video_id=vid,
            x=x,
            fps=float(entry.get("fps", 30.0)),
            frames_per_segment=int(entry.get("frames_per_segment", 16)),
        )

        labels_entry = entry.get("labels", {})
        y = np.zeros(num_classes, dtype=np.int64)
        for n in labels_entry.get("video", []):
            _require(0 <= int(n) < num_classes, vid, f"video label class {n} out of range")
            y[int(n)] = 1
        pairs = []
        for seg in labels_entry.get("segments", []):
            t, n = int(seg["t"]), int(seg["n"])
            _require(0 <= t < l, vid, f"segment label t={t} out of range for l={l}")
            _require(0 <= n < num_classes, vid, f"segment label class {n} out of range")
            _require(y[n] == 1, vid, f"segment label class {n} missing from video labels")
            pairs.append((t, n))
        labels = LabelSet(y=y, segment_labels=tuple(pairs))

        instances = []
        for inst in labels_entry.get("instances", []):
            n, start, end = int(inst["n"]), int(inst["start"]), int(inst["end"])
            _require(0 <= n < num_classes, vid, f"instance class {n} out of range")
            _require(0 <= start <= end < l, vid, f"instance [{start}, {end}] out of range")
            instances.append(GroundTruthInstance(n, start, end))

        records.append(CorpusRecord(features, labels, tuple(instances)))
    return records


def write_corpus(
    records: Sequence[CorpusRecord],
    out_dir,
    manifest_name: str = "manifest.json",
    feature_subdir: str = "features",
) -> str:
    """Write feature files plus manifest; returns the manifest path."""
    out_dir = os.fspath(out_dir)
    feat_dir = os.path.join(out_dir, feature_subdir)
    os.makedirs(feat_dir, exist_ok=True)
    entries = []
    for features, labels, instances in records:
        rel = os.path.join(feature_subdir, f"{features.video_id}.bin")
        features.x.astype(FEATURE_DTYPE).tofile(os.path.join(out_dir, rel))
        entries.append(_manifest_entry(features, labels, instances, rel))
    manifest_path = os.path.join(out_dir, manifest_name)
    with open(manifest_path, "w") as fh:
        json.dump(entries, fh, indent=2)
        fh.write("\n")
    return manifest_path


def _manifest_entry(features, labels, instances, feature_file) -> dict:
    return {
        "video_id": features.video_id,
        "feature_file": feature_file,
        "l": features.num_segments,
        "D": features.feature_dim,
        "fps": features.fps,
        "frames_per_segment": features.frames_per_segment,
        "labels": {
            "video": [int(n) for n in labels.present_classes()],
            "segments": [{"t": t, "n": n} for t, n in labels.segment_labels],
            "instances": [
                {"n": inst.class_index, "start": inst.start_segment, "end": inst.end_segment}
                for inst in instances
            ],
        },
    }
