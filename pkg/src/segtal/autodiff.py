"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

A graph is rebuilt for every evaluation: each operation returns a new
:class:`Tensor` holding its value, its parents and a closure that routes
incoming gradients to those parents. ``backward()`` walks the graph once in
reverse topological order and accumulates gradients into every reachable
tensor created with ``requires_grad=True``. Only the operations needed by
the localization network and its losses are provided; everything runs on
CPU at 64-bit precision.

Conventions that matter for gradient checking:

- ``relu`` uses subgradient 0 at exactly 0,
- top-k selection breaks ties by lower index (stable sort),
- ``clip`` passes gradients through at the boundaries and blocks them
  strictly outside,
- boolean masks (attention, dropout) enter as constants, so gradients flow
  only through the kept values.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "add",
    "sub",
    "neg",
    "mul",
    "div",
    "matmul",
    "transpose",
    "relu",
    "exp",
    "log",
    "sqrt",
    "clip",
    "arccos",
    "take",
    "gather",
    "stack",
    "sum_all",
    "linear",
    "topk_mean",
    "softmax_over_classes",
    "softmax_over_time",
    "log_softmax_over_classes",
    "log_softmax_over_time",
    "angular_margin",
    "angular_margin_value",
    "pairwise_smoothness",
    "logsumexp",
    "topk_mean_value",
    "grad_check",
]


class Tensor:
    """A node in the computation graph: value, gradient, parent links."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in _parents
        )
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor({self.data!r}, requires_grad={self.requires_grad})"

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``self`` must be a scalar. Each node's backward hook runs exactly
        once, after all gradient contributions from its consumers have been
        accumulated, so multi-consumer nodes are handled correctly.
        """
        if self.data.ndim != 0:
            raise ValueError("backward() requires a scalar root")
        order = _topological_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)

    # Operator sugar; constants are wrapped automatically.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    @property
    def T(self):
        return transpose(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural operations


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data + b.data, _parents=(a, b))

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    out._backward = backward
    return out


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data - b.data, _parents=(a, b))

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    out._backward = backward
    return out


def neg(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(-a.data, _parents=(a,))
    out._backward = lambda g: _accumulate(a, -g)
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data * b.data, _parents=(a, b))

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    out._backward = backward
    return out


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data / b.data, _parents=(a, b))

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    out._backward = backward
    return out


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if not (
        (a.ndim == 2 and b.ndim == 2)
        or (a.ndim == 2 and b.ndim == 1)
        or (a.ndim == 1 and b.ndim == 2)
    ):
        raise ValueError(f"unsupported matmul shapes {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"shape mismatch {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, _parents=(a, b))

    def backward(g):
        if a.ndim == 2 and b.ndim == 2:
            _accumulate(a, g @ b.data.T)
            _accumulate(b, a.data.T @ g)
        elif a.ndim == 2 and b.ndim == 1:
            _accumulate(a, np.outer(g, b.data))
            _accumulate(b, a.data.T @ g)
        else:  # (k,) @ (k, n)
            _accumulate(a, b.data @ g)
            _accumulate(b, np.outer(a.data, g))

    out._backward = backward
    return out


def transpose(a) -> Tensor:
    a = _wrap(a)
    if a.ndim != 2:
        raise ValueError("transpose expects a matrix")
    out = Tensor(a.data.T, _parents=(a,))
    out._backward = lambda g: _accumulate(a, g.T)
    return out


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0.0  # subgradient 0 at exactly 0
    out = Tensor(np.maximum(a.data, 0.0), _parents=(a,))
    out._backward = lambda g: _accumulate(a, g * mask)
    return out


def exp(a) -> Tensor:
    a = _wrap(a)
    value = np.exp(a.data)
    out = Tensor(value, _parents=(a,))
    out._backward = lambda g: _accumulate(a, g * value)
    return out


def log(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.log(a.data), _parents=(a,))
    out._backward = lambda g: _accumulate(a, g / a.data)
    return out


def sqrt(a) -> Tensor:
    a = _wrap(a)
    value = np.sqrt(a.data)
    out = Tensor(value, _parents=(a,))
    out._backward = lambda g: _accumulate(a, g / (2.0 * value))
    return out


def clip(a, lo: float, hi: float) -> Tensor:
    a = _wrap(a)
    mask = (a.data >= lo) & (a.data <= hi)
    out = Tensor(np.clip(a.data, lo, hi), _parents=(a,))
    out._backward = lambda g: _accumulate(a, g * mask)
    return out


def arccos(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.arccos(a.data), _parents=(a,))

    def backward(g):
        _accumulate(a, -g / np.sqrt(1.0 - a.data * a.data))

    out._backward = backward
    return out


def take(a, indices) -> Tensor:
    """Select entries of a vector; repeated indices accumulate gradients."""
    a = _wrap(a)
    if a.ndim != 1:
        raise ValueError("take expects a vector")
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(a.data[idx], _parents=(a,))

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accumulate(a, ga)

    out._backward = backward
    return out


def gather(a, rows, cols) -> Tensor:
    """Select ``a[rows[i], cols[i]]`` entries of a matrix as a vector."""
    a = _wrap(a)
    if a.ndim != 2:
        raise ValueError("gather expects a matrix")
    r = np.asarray(rows, dtype=np.intp)
    c = np.asarray(cols, dtype=np.intp)
    out = Tensor(a.data[r, c], _parents=(a,))

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (r, c), g)
        _accumulate(a, ga)

    out._backward = backward
    return out


def stack(tensors: Sequence) -> Tensor:
    """Stack scalar tensors into a vector."""
    parents = tuple(_wrap(t) for t in tensors)
    out = Tensor(np.stack([p.data for p in parents]), _parents=parents)

    def backward(g):
        for i, p in enumerate(parents):
            _accumulate(p, g[i])

    out._backward = backward
    return out


def sum_all(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.sum(), _parents=(a,))
    out._backward = lambda g: _accumulate(a, np.broadcast_to(g, a.shape).copy())
    return out


def linear(x, weight, bias) -> Tensor:
    """Affine map ``x @ weight + bias`` with the bias broadcast across rows."""
    return add(matmul(x, weight), bias)


# ---------------------------------------------------------------------------
# aggregation and normalization operations


def _top_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries, ties broken by lower index."""
    order = np.argsort(-values, kind="stable")
    idx = np.sort(order[:k])
    return idx


def topk_mean_value(values: np.ndarray, k: int) -> float:
    """Mean of the k largest entries of a plain array (shared tie rule)."""
    values = np.asarray(values, dtype=np.float64)
    if not 1 <= k <= values.shape[0]:
        raise ValueError(f"k={k} out of range for length {values.shape[0]}")
    idx = _top_indices(values, k)
    return float(values[idx].sum() / k)


def topk_mean(v, k: int) -> Tensor:
    """Mean of the k largest entries; gradient is 1/k on the selected ones."""
    v = _wrap(v)
    if v.ndim != 1:
        raise ValueError("topk_mean expects a vector")
    if not 1 <= k <= v.shape[0]:
        raise ValueError(f"k={k} out of range for length {v.shape[0]}")
    idx = _top_indices(v.data, k)
    out = Tensor(v.data[idx].sum() / k, _parents=(v,))

    def backward(g):
        gv = np.zeros_like(v.data)
        gv[idx] = g / k
        _accumulate(v, gv)

    out._backward = backward
    return out


def softmax_over_classes(s) -> Tensor:
    """Softmax of a score vector, computed with max subtraction."""
    s = _wrap(s)
    if s.ndim != 1:
        raise ValueError("softmax_over_classes expects a vector")
    z = s.data - s.data.max()
    e = np.exp(z)
    p = e / e.sum()
    out = Tensor(p, _parents=(s,))
    out._backward = lambda g: _accumulate(s, (g - np.dot(g, p)) * p)
    return out


def log_softmax_over_classes(s) -> Tensor:
    s = _wrap(s)
    if s.ndim != 1:
        raise ValueError("log_softmax_over_classes expects a vector")
    z = s.data - s.data.max()
    logp = z - np.log(np.exp(z).sum())
    p = np.exp(logp)
    out = Tensor(logp, _parents=(s,))
    out._backward = lambda g: _accumulate(s, g - p * g.sum())
    return out


def softmax_over_time(c) -> Tensor:
    """Column-wise softmax of an (l, N) activation matrix."""
    c = _wrap(c)
    if c.ndim != 2:
        raise ValueError("softmax_over_time expects a matrix")
    z = c.data - c.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    a = e / e.sum(axis=0, keepdims=True)
    out = Tensor(a, _parents=(c,))

    def backward(g):
        _accumulate(c, (g - (g * a).sum(axis=0, keepdims=True)) * a)

    out._backward = backward
    return out


def log_softmax_over_time(c) -> Tensor:
    c = _wrap(c)
    if c.ndim != 2:
        raise ValueError("log_softmax_over_time expects a matrix")
    z = c.data - c.data.max(axis=0, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=0, keepdims=True))
    a = np.exp(logp)
    out = Tensor(logp, _parents=(c,))
    out._backward = lambda g: _accumulate(c, g - a * g.sum(axis=0, keepdims=True))
    return out


def logsumexp(z) -> Tensor:
    """log(sum(exp(z))) of a vector, shifted by max(z) for stability."""
    z = _wrap(z)
    shift = float(z.data.max())
    return add(log(sum_all(exp(sub(z, shift)))), shift)


# ---------------------------------------------------------------------------
# special operations for the angular-margin and smoothness losses


def _margin_sector(theta: float, m: int) -> int:
    return int(np.clip(math.floor(m * theta / math.pi), 0, m - 1))


def angular_margin_value(theta: float, m: int, literal: bool = False) -> float:
    """Piecewise angular-margin transform of an angle in [0, pi].

    With margin order ``m`` the transform is ``(-1)^k cos(m theta) - 2k``
    for ``theta`` in the k-th sector ``[k pi/m, (k+1) pi/m]``, which is
    monotonically decreasing over [0, pi]. ``literal=True`` replaces the
    ``-2k`` offset with a constant ``-2``.
    """
    if m < 1 or int(m) != m:
        raise ValueError("margin order m must be a positive integer")
    k = _margin_sector(theta, m)
    offset = 2.0 if literal else 2.0 * k
    return float((-1.0) ** k * math.cos(m * theta) - offset)


def angular_margin(theta, m: int, literal: bool = False) -> Tensor:
    """Differentiable angular-margin transform of a scalar angle tensor.

    The sector index is piecewise constant, so the derivative is
    ``(-1)^k * (-m sin(m theta))`` in both the standard and literal forms.
    """
    theta = _wrap(theta)
    if theta.ndim != 0:
        raise ValueError("angular_margin expects a scalar angle")
    th = float(theta.data)
    k = _margin_sector(th, m)
    out = Tensor(angular_margin_value(th, m, literal), _parents=(theta,))

    def backward(g):
        _accumulate(theta, g * (-1.0) ** k * (-m * math.sin(m * th)))

    out._backward = backward
    return out


def pairwise_smoothness(c, weights: np.ndarray) -> Tensor:
    """Weighted squared pairwise row differences, summed over classes.

    ``sum_n sum_{i,j} weights[i, j] * (c[i, n] - c[j, n])**2`` with
    ``weights`` treated as a constant. The forward pass uses the literal
    pairwise form so a temporally constant input yields exactly 0.
    """
    c = _wrap(c)
    w = np.asarray(weights, dtype=np.float64)
    if c.ndim != 2 or w.shape != (c.shape[0], c.shape[0]):
        raise ValueError("pairwise_smoothness expects (l, N) input and (l, l) weights")
    diff = c.data[:, None, :] - c.data[None, :, :]
    out = Tensor(np.einsum("ij,ijn->", w, diff * diff), _parents=(c,))

    def backward(g):
        totals = w.sum(axis=1) + w.sum(axis=0)
        gc = 2.0 * (totals[:, None] * c.data - (w + w.T) @ c.data) * g
        _accumulate(c, gc)

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# finite-difference verification harness


def grad_check(
    loss_builder: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    epsilon: float = 1e-6,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``loss_builder`` must deterministically map a dict of parameter tensors
    to a scalar loss tensor. Every entry of every parameter is perturbed by
    ``+/- epsilon``; the returned value is the maximum over entries of
    ``|g_analytic - g_fd| / max(1, |g_analytic|, |g_fd|)``.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")

    nodes = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in params.items()}
    loss = loss_builder(nodes)
    if not np.isfinite(loss.data):
        raise ValueError("loss is not finite at the evaluation point")
    loss.backward()
    analytic = {
        k: (n.grad if n.grad is not None else np.zeros_like(n.data))
        for k, n in nodes.items()
    }

    def value_at(perturbed: Mapping[str, np.ndarray]) -> float:
        consts = {k: Tensor(v) for k, v in perturbed.items()}
        out = loss_builder(consts)
        if not np.isfinite(out.data):
            raise ValueError("loss is not finite at a perturbed point")
        return float(out.data)

    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    worst = 0.0
    for name, arr in base.items():
        flat = arr.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = value_at(base)
            flat[i] = orig - epsilon
            down = value_at(base)
            flat[i] = orig
            gfd = (up - down) / (2.0 * epsilon)
            rel = abs(ga[i] - gfd) / max(1.0, abs(ga[i]), abs(gfd))
            worst = max(worst, rel)
    return worst
