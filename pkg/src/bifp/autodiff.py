"""Reverse-mode automatic differentiation over dense float64 tensors.

Every operation records itself on an implicit tape: result tensors keep
references to their operands plus a backward rule, and a global sequence
counter remembers execution order. ``backward`` replays the reachable part
of that tape in reverse, which makes gradient accumulation order (and
therefore the floating-point result) fully deterministic.

Gradient contract: each ``backward`` call overwrites the gradients of every
tensor reachable from the loss. Callers never need to zero gradients, and
calling ``backward`` twice on the same graph recomputes the same values.
"""

from __future__ import annotations

import itertools

import numpy as np


class AutodiffError(ValueError):
    """Base class for tensor/tape contract violations."""


class ShapeMismatchError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


class TapeError(AutodiffError):
    pass


# Creation-order counter shared by all tensors; doubles as the tape position.
_SEQ = itertools.count()


class Tensor:
    """Dense float64 array node of the autodiff graph.

    Leaf tensors are created directly (parameters use ``requires_grad=True``);
    operation results are created by the op functions below and carry the
    backward rule that propagates gradients to their operands.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor holds non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._seq = next(_SEQ)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Leaf tensor that never receives gradients."""
    return Tensor(x, requires_grad=False)


def _make(data: np.ndarray, parents, backward) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _expit(x: np.ndarray) -> np.ndarray:
    # Branch on sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product of two 2-D tensors, [n x k] @ [k x m]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: incompatible shapes {a.shape} vs {b.shape}")

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw)


def add(a, b) -> Tensor:
    """Elementwise sum; also accepts [n x m] + [m] for bias rows."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:

        def bw(g):
            _accum(a, g)
            _accum(b, g)

    elif a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:

        def bw(g):
            _accum(a, g)
            _accum(b, g.sum(axis=0))

    else:
        raise ShapeMismatchError(f"add: incompatible shapes {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"sub: incompatible shapes {a.shape} vs {b.shape}")

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product of same-shape tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mul: incompatible shapes {a.shape} vs {b.shape}")

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), bw)


def scale(x, c: float) -> Tensor:
    """Multiply by a python scalar."""
    x = as_tensor(x)
    c = float(c)

    def bw(g):
        _accum(x, g * c)

    return _make(x.data * c, (x,), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        _accum(x, g * (x.data > 0))

    return _make(np.maximum(x.data, 0.0), (x,), bw)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _expit(x.data)

    def bw(g):
        _accum(x, g * s * (1.0 - s))

    return _make(s, (x,), bw)


def mean(x) -> Tensor:
    """Full reduction to a scalar."""
    x = as_tensor(x)
    n = x.data.size

    def bw(g):
        _accum(x, np.broadcast_to(g / n, x.shape).copy())

    return _make(np.mean(x.data), (x,), bw)


def sum_(x) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        _accum(x, np.broadcast_to(g, x.shape).copy())

    return _make(np.sum(x.data), (x,), bw)


def logistic_loss(logits, labels) -> Tensor:
    """Mean logistic loss for labels in {-1, +1}: mean(log(1 + exp(-y*z)))."""
    logits, labels = as_tensor(logits), as_tensor(labels)
    if logits.shape != labels.shape:
        raise ShapeMismatchError(
            f"logistic_loss: incompatible shapes {logits.shape} vs {labels.shape}"
        )
    margins = labels.data * logits.data
    n = logits.data.size

    def bw(g):
        _accum(logits, g * (-labels.data) * _expit(-margins) / n)
        # labels are targets; no gradient is defined for them

    return _make(np.mean(np.logaddexp(0.0, -margins)), (logits,), bw)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeMismatchError(f"transpose: needs a 2-D tensor, got shape {x.shape}")

    def bw(g):
        _accum(x, g.T)

    return _make(x.data.T.copy(), (x,), bw)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    new = np.reshape(x.data, shape).copy()

    def bw(g):
        _accum(x, g.reshape(x.shape))

    return _make(new, (x,), bw)


def concat(tensors) -> Tensor:
    """Concatenate 1-D tensors into one 1-D tensor."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeMismatchError("concat: needs at least one tensor")
    for t in tensors:
        if t.data.ndim != 1:
            raise ShapeMismatchError(f"concat: needs 1-D tensors, got shape {t.shape}")
    sizes = [t.data.size for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _accum(t, g[lo:hi])

    return _make(np.concatenate([t.data for t in tensors]), tuple(tensors), bw)


def straight_through(scores: Tensor, hard: np.ndarray) -> Tensor:
    """Forward the hard 0/1 mask values, backward the gradient to the scores.

    This is the straight-through rule used for mask binarization: the forward
    pass sees the binary mask, the backward pass treats binarization as the
    identity so gradients reach the continuous scores unchanged.
    """
    scores = as_tensor(scores)
    hard = np.asarray(hard, dtype=np.float64)
    if scores.shape != hard.shape:
        raise ShapeMismatchError(
            f"straight_through: incompatible shapes {scores.shape} vs {hard.shape}"
        )

    def bw(g):
        _accum(scores, g)

    return _make(hard.copy(), (scores,), bw)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad tensor reachable from ``loss``.

    Gradients of reachable tensors are overwritten; tensors not feeding the
    loss keep whatever gradient they had. The reachable op nodes are replayed
    in reverse execution order, so results are bitwise reproducible.
    """
    if not isinstance(loss, Tensor):
        raise TapeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward is None:
        raise TapeError("loss is not an operation result on the tape")

    nodes = []
    stack = [loss]
    seen = set()
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        t.grad = None  # overwrite semantics
        if t._backward is not None:
            nodes.append(t)
            stack.extend(t._parents)

    nodes.sort(key=lambda t: t._seq)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(nodes):
        if node.grad is not None:
            node._backward(node.grad)
