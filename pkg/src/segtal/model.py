"""Two-branch localization network over precomputed segment features.

A shared fully connected embedding with ReLU (and dropout during training)
produces a discriminative feature matrix ``f``; two linear heads map ``f``
to a classification activation sequence and a localization activation
sequence, one score per segment and class. A separate weight matrix with
one row per class serves the angular-margin loss and is deliberately not
tied to either head.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import autodiff as ad

__all__ = [
    "Parameters",
    "ParameterNodes",
    "CasPair",
    "init_params",
    "forward",
    "forward_values",
    "save_checkpoint",
    "load_checkpoint",
]

DEFAULT_DROPOUT_RATE = 0.7

# Serialization order of the parameter blocks in checkpoint files.
PARAM_FIELDS = (
    "embed_w",
    "embed_b",
    "cls_w",
    "cls_b",
    "loc_w",
    "loc_b",
    "sphere_w",
)


@dataclass
class Parameters:
    """All trainable arrays; shapes are (D, D), (D,), (D, N), (N,), (N, D)."""

    embed_w: np.ndarray
    embed_b: np.ndarray
    cls_w: np.ndarray
    cls_b: np.ndarray
    loc_w: np.ndarray
    loc_b: np.ndarray
    sphere_w: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            arr = np.asarray(getattr(self, f.name), dtype=np.float64)
            if not np.isfinite(arr).all():
                raise ValueError(f"parameter {f.name} contains non-finite values")
            setattr(self, f.name, arr)
        if np.any(np.linalg.norm(self.sphere_w, axis=1) == 0.0):
            raise ValueError("sphere_w rows must be non-zero (angles undefined)")

    @property
    def feature_dim(self) -> int:
        return self.embed_w.shape[0]

    @property
    def num_classes(self) -> int:
        return self.cls_w.shape[1]

    def copy(self) -> "Parameters":
        return Parameters(**{f: getattr(self, f).copy() for f in PARAM_FIELDS})

    def to_nodes(self) -> "ParameterNodes":
        return ParameterNodes(
            **{f: ad.Tensor(getattr(self, f), requires_grad=True) for f in PARAM_FIELDS}
        )


@dataclass
class ParameterNodes:
    """Graph-side view of :class:`Parameters` for one forward/backward pass."""

    embed_w: ad.Tensor
    embed_b: ad.Tensor
    cls_w: ad.Tensor
    cls_b: ad.Tensor
    loc_w: ad.Tensor
    loc_b: ad.Tensor
    sphere_w: ad.Tensor

    def gradients(self) -> dict[str, np.ndarray]:
        """Accumulated gradients per field, zeros where nothing flowed."""
        out = {}
        for f in PARAM_FIELDS:
            node = getattr(self, f)
            out[f] = node.grad if node.grad is not None else np.zeros_like(node.data)
        return out


@dataclass
class CasPair:
    """Embedded features plus both class activation sequences for one video."""

    f: ad.Tensor
    cas_cls: ad.Tensor
    cas_loc: ad.Tensor


def init_params(feature_dim: int, num_classes: int, rng_seed: int) -> Parameters:
    """Uniform init in +/- 1/sqrt(fan_in); zero biases; unit sphere rows."""
    if feature_dim < 1 or num_classes < 1:
        raise ValueError("feature_dim and num_classes must be positive")
    rng = np.random.default_rng(rng_seed)
    bound = 1.0 / np.sqrt(feature_dim)
    embed_w = rng.uniform(-bound, bound, size=(feature_dim, feature_dim))
    cls_w = rng.uniform(-bound, bound, size=(feature_dim, num_classes))
    loc_w = rng.uniform(-bound, bound, size=(feature_dim, num_classes))
    sphere_w = rng.uniform(-bound, bound, size=(num_classes, feature_dim))
    sphere_w /= np.linalg.norm(sphere_w, axis=1, keepdims=True)
    return Parameters(
        embed_w=embed_w,
        embed_b=np.zeros(feature_dim),
        cls_w=cls_w,
        cls_b=np.zeros(num_classes),
        loc_w=loc_w,
        loc_b=np.zeros(num_classes),
        sphere_w=sphere_w,
    )


def forward(
    x: np.ndarray,
    params: ParameterNodes,
    dropout_active: bool = False,
    rng: Optional[np.random.Generator] = None,
    dropout_rate: float = DEFAULT_DROPOUT_RATE,
) -> CasPair:
    """Run the network on one video's (l, D) feature matrix.

    With ``dropout_active`` an inverted-dropout mask drawn from ``rng`` is
    applied to the embedded features; with it off the forward pass is a pure
    function of the inputs. The dropout mask is a constant in the graph.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.embed_w.shape[0]:
        raise ValueError(f"features shaped {x.shape} do not match the embedding")
    f = ad.relu(ad.linear(x, params.embed_w, params.embed_b))
    if dropout_active:
        if rng is None:
            raise ValueError("dropout requires an rng")
        keep = 1.0 - dropout_rate
        mask = (rng.random(f.shape) >= dropout_rate) / keep
        f = ad.mul(f, mask)
    cas_cls = ad.linear(f, params.cls_w, params.cls_b)
    cas_loc = ad.linear(f, params.loc_w, params.loc_b)
    return CasPair(f=f, cas_cls=cas_cls, cas_loc=cas_loc)


def forward_values(x: np.ndarray, params: Parameters) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inference pass (dropout off): returns plain (f, cas_cls, cas_loc)."""
    cas = forward(x, params.to_nodes())
    return cas.f.data, cas.cas_cls.data, cas.cas_loc.data


def save_checkpoint(path, params: Parameters, seed: Optional[int] = None, step: int = 0):
    """Write a checkpoint: one JSON header line, then raw little-endian
    float64 blocks in ``PARAM_FIELDS`` order."""
    header = {
        "feature_dim": params.feature_dim,
        "num_classes": params.num_classes,
        "seed": seed,
        "step": int(step),
        "order": list(PARAM_FIELDS),
        "shapes": {f: list(getattr(params, f).shape) for f in PARAM_FIELDS},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode())
        fh.write(b"\n")
        for f in PARAM_FIELDS:
            fh.write(np.ascontiguousarray(getattr(params, f), dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[Parameters, dict]:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        blocks = {}
        for f in header["order"]:
            shape = tuple(header["shapes"][f])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError(f"checkpoint truncated while reading {f}")
            blocks[f] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return Parameters(**blocks), header
