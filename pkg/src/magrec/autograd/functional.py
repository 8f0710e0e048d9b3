"""Differentiable operations on :class:`Tensor`.

Every function takes tensors (or plain numbers/arrays, treated as constants),
computes the forward value with numpy and registers a backward rule.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import scipy.sparse as sp

from magrec.autograd.tensor import Tensor, as_tensor
from magrec.errors import ContractError, DimensionError

BCE_CLAMP = 1e-7


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a} and {b}") from None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise binary -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def back(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return Tensor._from_op(ad * bd, (a, b), back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return Tensor._from_op(out, (a, b), back)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._from_op(ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


# -- elementwise unary --------------------------------------------------------

def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # exp(-x) may overflow to inf for very negative x, giving the correct limit 0
    with np.errstate(over="ignore"):
        out = 1.0 / (1.0 + np.exp(-x.data))
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope)
    return Tensor._from_op(x.data * scale, (x,), lambda g: (g * scale,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return Tensor._from_op(np.log(xd), (x,), lambda g: (g / xd,))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is passed only where no clamping happened."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor._from_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "leaky_relu": leaky_relu, "exp": exp, "log": log}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch an elementwise operation by name."""
    if op in _UNARY:
        if len(args) != 1:
            raise ContractError(f"{op} takes one argument, got {len(args)}")
        return _UNARY[op](args[0])
    if op in _BINARY:
        if len(args) != 2:
            raise ContractError(f"{op} takes two arguments, got {len(args)}")
        return _BINARY[op](*args)
    raise ValueError(f"unknown elementwise op {op!r}")


# -- reductions and shape -----------------------------------------------------

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(x.data.sum(axis=axis, keepdims=keepdims), (x,), back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._from_op(x.data.T, (x,), lambda g: (g.T,))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, ts, back)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data

    def back(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return Tensor._from_op(ad @ bd, (a, b), back)


def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"softmax_rows expects an m x n matrix with n >= 1, got {x.shape}")
    z = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    out = z / z.sum(axis=1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return Tensor._from_op(out, (x,), back)


# -- indexing and segments ----------------------------------------------------

def _check_index(idx: np.ndarray, bound: int, what: str) -> None:
    if idx.size and (idx.min() < 0 or idx.max() >= bound):
        raise IndexError(f"{what}: index out of range [0, {bound})")


# below this many scalars np.add.at beats building a sparse matrix
_SMALL_SCATTER = 4096


def scatter_add_rows(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    """Plain numpy helper: row j of the result sums the rows of ``values`` with index j."""
    if index.size == 0:
        return np.zeros((n,) + values.shape[1:])
    flat = values.reshape(len(index), -1)
    if flat.size <= _SMALL_SCATTER:
        out = np.zeros((n, flat.shape[1]))
        np.add.at(out, index, flat)
        return out.reshape((n,) + values.shape[1:])
    m = sp.csr_matrix((np.ones(len(index)), (index, np.arange(len(index)))), shape=(n, len(index)))
    return np.asarray(m @ flat).reshape((n,) + values.shape[1:])


def gather_rows(x, index) -> Tensor:
    """Select rows ``x[index]``; the backward pass scatter-adds into the source."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    _check_index(index, x.shape[0], "gather_rows")
    n = x.shape[0]
    return Tensor._from_op(x.data[index], (x,), lambda g: (scatter_add_rows(g, index, n),))


def segment_sum(messages, targets, n_nodes: int) -> Tensor:
    """Sum message rows into ``n_nodes`` buckets given by ``targets``."""
    messages = as_tensor(messages)
    targets = np.asarray(targets, dtype=np.int64)
    if messages.shape[0] != len(targets):
        raise DimensionError(f"segment_sum: {messages.shape[0]} messages but {len(targets)} targets")
    _check_index(targets, n_nodes, "segment_sum")
    out = scatter_add_rows(messages.data, targets, n_nodes)
    return Tensor._from_op(out, (messages,), lambda g: (g[targets],))


def segment_softmax(scores, segments, n_segments: int) -> Tensor:
    """Softmax of ``scores`` (E x k) taken independently within each segment."""
    scores = as_tensor(scores)
    segments = np.asarray(segments, dtype=np.int64)
    shift = np.full((n_segments,) + scores.shape[1:], -np.inf)
    np.maximum.at(shift, segments, scores.data)
    ex = exp(sub(scores, shift[segments]))
    denom = segment_sum(ex, segments, n_segments)
    return div(ex, gather_rows(denom, segments))


def pool_by_segment(assign, x, layout: "SegmentLayout") -> Tensor:
    """Per-segment ``assign_gᵀ @ x_g`` for every segment g, stacked row-wise.

    ``assign`` is N x c and ``x`` is N x d with rows grouped by segment; the
    result is (n_segments * c) x d with segment g occupying rows g*c..g*c+c-1.
    """
    assign, x = as_tensor(assign), as_tensor(x)
    if assign.shape[0] != x.shape[0]:
        raise DimensionError(f"pool_by_segment: {assign.shape} and {x.shape} disagree on rows")
    c, d = assign.shape[1], x.shape[1]
    a_pad = layout.pad(assign.data)
    x_pad = layout.pad(x.data)
    out = np.matmul(a_pad.transpose(0, 2, 1), x_pad).reshape(-1, d)

    def back(g):
        g3 = g.reshape(layout.n_segments, c, d)
        ga = layout.unpad(np.matmul(x_pad, g3.transpose(0, 2, 1))) if assign.requires_grad else None
        gx = layout.unpad(np.matmul(a_pad, g3)) if x.requires_grad else None
        return ga, gx

    return Tensor._from_op(out, (assign, x), back)


class SegmentLayout:
    """Row grouping for a contiguous, segment-ordered stack of rows."""

    def __init__(self, segments: np.ndarray, n_segments: int):
        segments = np.asarray(segments, dtype=np.int64)
        if segments.size and np.any(np.diff(segments) < 0):
            raise ContractError("segments must be sorted (rows grouped contiguously)")
        self.segments = segments
        self.n_segments = n_segments
        self.counts = np.bincount(segments, minlength=n_segments)
        starts = np.concatenate([[0], np.cumsum(self.counts)[:-1]])
        self.offsets = np.arange(len(segments)) - starts[segments]
        self.width = int(self.counts.max()) if n_segments else 0

    def pad(self, rows: np.ndarray) -> np.ndarray:
        out = np.zeros((self.n_segments, self.width) + rows.shape[1:])
        out[self.segments, self.offsets] = rows
        return out

    def unpad(self, padded: np.ndarray) -> np.ndarray:
        return padded[self.segments, self.offsets]


def scale_rows(x, weights) -> Tensor:
    """Multiply row i of ``x`` by the scalar ``weights[i]``."""
    x, weights = as_tensor(x), as_tensor(weights)
    w = weights.reshape(-1, 1) if weights.ndim == 1 else weights
    if w.shape != (x.shape[0], 1):
        raise DimensionError(f"scale_rows: {x.shape} rows vs weights {weights.shape}")
    return mul(x, w)


# -- losses -------------------------------------------------------------------

def bce_loss(predictions, labels) -> Tensor:
    """Mean binary cross-entropy; predictions are clamped away from 0 and 1."""
    predictions = as_tensor(predictions)
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=np.float64)
    if predictions.shape != y.shape:
        raise DimensionError(f"bce_loss: predictions {predictions.shape} vs labels {y.shape}")
    p = np.clip(predictions.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    m = p.size
    value = np.mean(-y * np.log(p) - (1.0 - y) * np.log1p(-p))

    def back(g):
        return (g * (-y / p + (1.0 - y) / (1.0 - p)) / m,)

    return Tensor._from_op(np.asarray(value), (predictions,), back)
