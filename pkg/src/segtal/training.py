"""Deterministic mini-batch training loop with an adaptive-moment optimizer.

Each step draws the next ``batch_size`` videos from a seeded epoch-cyclic
shuffle, builds one graph per video (videos have unequal length, so there
is no padding), averages the per-video gradients and applies one
bias-corrected adaptive-moment update. Single-threaded execution plus one
root seed make two runs with the same inputs bit-identical.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional, Sequence

import numpy as np

from .data import CorpusRecord
from .losses import LossWeights, total_loss
from .model import DEFAULT_DROPOUT_RATE, PARAM_FIELDS, Parameters, forward, save_checkpoint
from .seeds import derive_seed

__all__ = [
    "TrainConfig",
    "StepRecord",
    "TrainingError",
    "AdamState",
    "accumulate_and_step",
    "train",
    "save_history",
    "load_history",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    max_steps: int = 3000
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    dropout_rate: float = DEFAULT_DROPOUT_RATE
    checkpoint_every: int = 0
    eval_every: int = 0

    def __post_init__(self):
        # learning_rate 0 is allowed: it runs the loop without moving params.
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be non-negative")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")


@dataclass
class StepRecord:
    """One logged training step; every value is finite by construction."""

    step: int
    total: float
    classification: float
    partial_segment: float
    sphere: float
    propagation: float
    grad_norm: float


class TrainingError(RuntimeError):
    """Raised when training hits a non-finite loss or gradient."""

    def __init__(self, message: str, step: int, video_id: str = ""):
        super().__init__(f"step {step}, video {video_id!r}: {message}")
        self.step = step
        self.video_id = video_id


class AdamState:
    """First/second moment estimates plus the shared step counter."""

    def __init__(self, params: Parameters):
        self.step = 0
        self.m = {f: np.zeros_like(getattr(params, f)) for f in PARAM_FIELDS}
        self.v = {f: np.zeros_like(getattr(params, f)) for f in PARAM_FIELDS}


def accumulate_and_step(
    params: Parameters,
    gradients: dict[str, np.ndarray],
    state: AdamState,
    learning_rate: float,
) -> Parameters:
    """Apply one bias-corrected adaptive-moment update in place."""
    state.step += 1
    t = state.step
    for name in PARAM_FIELDS:
        g = gradients[name]
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in {name}", step=t)
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1**t)
        v_hat = v / (1.0 - ADAM_BETA2**t)
        getattr(params, name)[...] -= learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPSILON)
    return params


def train(
    corpus: Sequence[CorpusRecord],
    params: Parameters,
    config: TrainConfig,
    checkpoint_dir: Optional[str] = None,
    eval_fn: Optional[Callable[[int, Parameters], None]] = None,
) -> tuple[Parameters, list[StepRecord]]:
    """Train on a corpus; returns updated parameters and the step history.

    The input parameters are copied, never mutated. Checkpoints are written
    to ``checkpoint_dir`` every ``checkpoint_every`` steps when both are
    set; ``eval_fn(step, params)`` is invoked every ``eval_every`` steps.
    Aborts with :class:`TrainingError` on the first non-finite loss,
    naming the offending step and video.
    """
    if len(corpus) == 0:
        raise ValueError("cannot train on an empty corpus")
    for record in corpus:
        if record.labels.present_classes().size == 0:
            raise ValueError(f"{record.features.video_id}: training videos need >= 1 class")

    params = params.copy()
    state = AdamState(params)
    weights = config.loss_weights
    batch_rng = np.random.default_rng(derive_seed(config.seed, "batching"))
    dropout_rng = np.random.default_rng(derive_seed(config.seed, "dropout"))
    dropout_on = config.dropout_rate > 0.0

    order = batch_rng.permutation(len(corpus))
    cursor = 0
    history: list[StepRecord] = []
    for step in range(1, config.max_steps + 1):
        batch_grads = {f: np.zeros_like(getattr(params, f)) for f in PARAM_FIELDS}
        totals = {"total": 0.0, "classification": 0.0, "partial_segment": 0.0,
                  "sphere": 0.0, "propagation": 0.0}
        for _ in range(config.batch_size):
            if cursor >= len(order):
                order = batch_rng.permutation(len(corpus))
                cursor = 0
            record = corpus[int(order[cursor])]
            cursor += 1

            nodes = params.to_nodes()
            cas = forward(
                record.features.x,
                nodes,
                dropout_active=dropout_on,
                rng=dropout_rng,
                dropout_rate=config.dropout_rate,
            )
            loss, breakdown = total_loss(cas, record.labels, weights, nodes.sphere_w)
            if not np.isfinite(loss.data):
                raise TrainingError(
                    "non-finite loss", step=step, video_id=record.features.video_id
                )
            loss.backward()
            for name, g in nodes.gradients().items():
                batch_grads[name] += g
            for key in totals:
                totals[key] += breakdown[key]

        scale = 1.0 / config.batch_size
        for name in PARAM_FIELDS:
            batch_grads[name] *= scale
        grad_norm = float(
            np.sqrt(sum(float((g * g).sum()) for g in batch_grads.values()))
        )
        accumulate_and_step(params, batch_grads, state, config.learning_rate)

        history.append(
            StepRecord(
                step=step,
                total=totals["total"] * scale,
                classification=totals["classification"] * scale,
                partial_segment=totals["partial_segment"] * scale,
                sphere=totals["sphere"] * scale,
                propagation=totals["propagation"] * scale,
                grad_norm=grad_norm,
            )
        )
        if checkpoint_dir and config.checkpoint_every and step % config.checkpoint_every == 0:
            save_checkpoint(
                os.path.join(checkpoint_dir, f"step-{step:06d}.ckpt"),
                params,
                seed=config.seed,
                step=step,
            )
        if eval_fn is not None and config.eval_every and step % config.eval_every == 0:
            eval_fn(step, params)
    return params, history


def save_history(path, history: Sequence[StepRecord]):
    """Write the step history as JSON lines, one record per step."""
    with open(path, "w") as fh:
        for record in history:
            fh.write(json.dumps(asdict(record), sort_keys=True))
            fh.write("\n")


def load_history(path) -> list[StepRecord]:
    with open(path) as fh:
        return [StepRecord(**json.loads(line)) for line in fh if line.strip()]
