"""Weakly supervised temporal action localization from segment-level labels.

A numpy-only library (plus a small CLI) that trains a two-branch network on
precomputed per-segment video features using sparse segment labels, and
evaluates temporal proposals with detection and classification mAP.
"""

from .autodiff import Tensor, grad_check
from .data import (
    AnnotationLog,
    CorpusRecord,
    FeatureSequence,
    GroundTruthInstance,
    LabelSet,
    aggregate_annotation_ratio,
    annotation_ratio,
    ingest_corpus,
    sample_segment_labels,
    seconds_to_segment,
    write_corpus,
)
from .evaluation import EvalReport, classification_map, detection_map, evaluate_corpus, temporal_iou
from .inference import Proposal, classify_video, extract_proposals, fuse_cas
from .losses import LossWeights, similarity_matrix, total_loss
from .model import CasPair, Parameters, forward, init_params, load_checkpoint, save_checkpoint
from .synthetic import SynthConfig, corpus_stats, generate
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "grad_check",
    "AnnotationLog",
    "CorpusRecord",
    "FeatureSequence",
    "GroundTruthInstance",
    "LabelSet",
    "aggregate_annotation_ratio",
    "annotation_ratio",
    "ingest_corpus",
    "sample_segment_labels",
    "seconds_to_segment",
    "write_corpus",
    "EvalReport",
    "classification_map",
    "detection_map",
    "evaluate_corpus",
    "temporal_iou",
    "Proposal",
    "classify_video",
    "extract_proposals",
    "fuse_cas",
    "LossWeights",
    "similarity_matrix",
    "total_loss",
    "CasPair",
    "Parameters",
    "forward",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "SynthConfig",
    "corpus_stats",
    "generate",
    "TrainConfig",
    "train",
]
