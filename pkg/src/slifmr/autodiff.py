"""Reverse-mode differentiation over dense numpy arrays.

A :class:`Node` wraps an array value. Operations between nodes record their
parents and a backward rule when any input requires a gradient; calling
``loss.backward()`` walks the recorded graph in reverse topological order and
accumulates gradients additively into every node on the way.

Values keep the dtype numpy promotion gives them. Parameters are float32;
``grad_check`` runs its probe in float64 so that central differences are
meaningful.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from slifmr import kernels

DTYPE = np.float32

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are not conformable."""


class NumericError(ArithmeticError):
    """An operation produced NaN or Inf."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        super().__init__(f"non-finite output in op '{op}'" + (f": {detail}" if detail else ""))


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the tape."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "requires_grad", "name")

    def __init__(self, value, parents=(), backward_fn=None, op="leaf", requires_grad=False, name=None):
        value = np.asarray(value)
        if not np.issubdtype(value.dtype, np.floating):
            value = value.astype(DTYPE)
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad
        self.name = name

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Node({self.op}{tag}, shape={self.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        """Accumulate d(self)/d(node) into ``node.grad`` for every ancestor."""
        order = _topological_order(self)
        if seed is None:
            if self.value.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.value)
        for node in order:
            if node is not self:
                node.grad = None
        self.grad = np.asarray(seed, dtype=self.value.dtype).reshape(self.value.shape)
        for node in reversed(order):
            if node.backward_fn is None or node.grad is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                g = _unbroadcast(np.asarray(g), parent.value.shape)
                if parent.grad is None:
                    parent.grad = g.astype(parent.value.dtype, copy=True)
                else:
                    parent.grad = parent.grad + g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def parameter(value, name=None) -> Node:
    value = np.array(value)
    if not np.issubdtype(value.dtype, np.floating):
        value = value.astype(DTYPE)
    return Node(value, requires_grad=True, name=name)


def constant(value) -> Node:
    return value if isinstance(value, Node) else Node(value)


def _topological_order(root: Node):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _make(value, op, parents, backward):
    if not np.all(np.isfinite(value)):
        raise NumericError(op)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Node(value, tuple(parents), backward, op, True)
    return Node(value, (), None, op, False)


def _pair(a, b):
    """Wrap operands; bare python scalars adopt the other operand's dtype."""
    if isinstance(a, Node) and not isinstance(b, Node) and np.isscalar(b):
        return a, Node(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Node) and not isinstance(a, Node) and np.isscalar(a):
        return Node(np.asarray(a, dtype=b.dtype)), b
    return constant(a), constant(b)


def _broadcast_check(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# elementwise -------------------------------------------------------------

def add(a, b) -> Node:
    a, b = _pair(a, b)
    _broadcast_check("add", a, b)
    return _make(a.value + b.value, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Node:
    a, b = _pair(a, b)
    _broadcast_check("sub", a, b)
    return _make(a.value - b.value, "sub", (a, b), lambda g: (g, -g))


def mul(a, b) -> Node:
    a, b = _pair(a, b)
    _broadcast_check("mul", a, b)
    av, bv = a.value, b.value
    return _make(av * bv, "mul", (a, b), lambda g: (g * bv, g * av))


def div(a, b) -> Node:
    a, b = _pair(a, b)
    _broadcast_check("div", a, b)
    av, bv = a.value, b.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv
    return _make(out, "div", (a, b), lambda g: (g / bv, -g * av / (bv * bv)))


def maximum(a, b) -> Node:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _pair(a, b)
    _broadcast_check("maximum", a, b)
    pick_a = a.value >= b.value
    return _make(np.where(pick_a, a.value, b.value), "maximum", (a, b),
                 lambda g: (g * pick_a, g * ~pick_a))


def tanh(x) -> Node:
    x = constant(x)
    y = np.tanh(x.value)
    return _make(y, "tanh", (x,), lambda g: (g * (1.0 - y * y),))


def exp(x) -> Node:
    x = constant(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.value)
    return _make(y, "exp", (x,), lambda g: (g * y,))


def log(x) -> Node:
    x = constant(x)
    xv = x.value
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(xv)
    return _make(y, "log", (x,), lambda g: (g / xv,))


def sigmoid(x) -> Node:
    x = constant(x)
    y = _stable_sigmoid(x.value)
    return _make(y, "sigmoid", (x,), lambda g: (g * y * (1.0 - y),))


def softplus(x) -> Node:
    """log(1 + e^x), computed without overflow."""
    x = constant(x)
    xv = x.value
    y = np.logaddexp(0.0, xv).astype(xv.dtype)
    return _make(y, "softplus", (x,), lambda g: (g * _stable_sigmoid(xv),))


def _stable_sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


# reductions and shape ------------------------------------------------------

def sum(x, axis=None, keepdims=False) -> Node:  # noqa: A001 - mirrors numpy
    x = constant(x)
    shape = x.value.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.sum(x.value, axis=axis, keepdims=keepdims), "sum", (x,), backward)


def mean(x, axis=None, keepdims=False) -> Node:
    x = constant(x)
    count = x.value.size if axis is None else np.prod([x.value.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Node:
    x = constant(x)
    old = x.value.shape
    return _make(x.value.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x) -> Node:
    x = constant(x)
    if x.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _make(x.value.T, "transpose", (x,), lambda g: (g.T,))


def concat(xs: Sequence, axis=1) -> Node:
    xs = [constant(x) for x in xs]
    try:
        value = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([0] + [x.value.shape[axis] for x in xs])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(value, "concat", xs, backward)


def _scatter_add(out, index, g):
    """out[index] += g along the first axis, summing repeated indices."""
    if index.ndim != 1:
        np.add.at(out, index, g)
        return
    if len(index) == 0:
        return
    order = np.argsort(index, kind="stable")
    sorted_idx = index[order]
    starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
    out[sorted_idx[starts]] += np.add.reduceat(g[order], starts, axis=0)


def take(x, index, axis=0) -> Node:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    x = constant(x)
    index = np.asarray(index, dtype=np.int64)
    shape = x.value.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        _scatter_add(np.moveaxis(out, axis, 0), index, np.moveaxis(g, axis, 0))
        return (out,)

    return _make(np.take(x.value, index, axis=axis), "take", (x,), backward)


def detach(x) -> Node:
    """Same value, no gradient path back to ``x``."""
    x = constant(x)
    return Node(x.value, op="detach")


# linear algebra ------------------------------------------------------------

def matmul(a, b) -> Node:
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _make(av @ bv, "matmul", (a, b), lambda g: (g @ bv.T, av.T @ g))


def spmm(pattern: kernels.CSRPattern, weights, x) -> Node:
    """Sparse-dense product; ``weights`` may be a constant array or a node."""
    w, x = constant(weights), constant(x)
    if w.ndim != 1 or w.shape[0] != pattern.nnz:
        raise ShapeError(f"spmm: {w.shape} weights for {pattern.nnz} stored entries")
    if x.ndim != 2 or x.shape[0] != pattern.num_cols:
        raise ShapeError(f"spmm: pattern {pattern.num_rows}x{pattern.num_cols} times {x.shape}")
    wv, xv = w.value, x.value

    def backward(g):
        gw = kernels.edge_dot(pattern, g, xv) if w.requires_grad else None
        gx = kernels.spmm_transpose(pattern, wv, g) if x.requires_grad else None
        return gw, gx

    return _make(kernels.spmm(pattern, wv, xv), "spmm", (w, x), backward)


# normalisations ------------------------------------------------------------

def softmax(x, axis=-1) -> Node:
    """Max-shifted softmax along ``axis``."""
    x = constant(x)
    z = x.value - np.max(x.value, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make(y, "softmax", (x,), backward)


def segment_softmax(offsets, scores) -> Node:
    """Softmax within each contiguous segment of a flat score vector."""
    scores = constant(scores)
    offsets = np.asarray(offsets, dtype=np.int64)
    if scores.ndim != 1 or offsets[-1] != scores.shape[0]:
        raise ShapeError("segment_softmax: offsets do not cover the score vector")
    y = kernels.segment_softmax(offsets, scores.value)
    seg = np.repeat(np.arange(len(offsets) - 1), np.diff(offsets))

    def backward(g):
        dots = kernels.segment_sum(offsets, g * y)
        return (y * (g - dots[seg]),)

    return _make(y, "segment_softmax", (scores,), backward)


def logsumexp(x, axis=-1, mask=None) -> Node:
    """log sum exp along ``axis``; entries where ``mask`` is False are left out."""
    x = constant(x)
    xv = x.value
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xv.shape)
        if not np.all(np.any(mask, axis=axis)):
            raise ShapeError("logsumexp: a slice has no unmasked entries")
        masked = np.where(mask, xv, -np.inf)
    else:
        masked = xv
    m = np.max(masked, axis=axis, keepdims=True)
    e = np.exp(masked - m)
    s = np.sum(e, axis=axis, keepdims=True)
    y = np.squeeze(np.log(s) + m, axis=axis)
    p = e / s

    def backward(g):
        return (np.expand_dims(g, axis) * p,)

    return _make(y.astype(xv.dtype), "logsumexp", (x,), backward)


def l2_normalize(x, eps=1e-12) -> Node:
    """Row-wise unit norm; all-zero rows stay zero."""
    x = constant(x)
    if x.ndim != 2:
        raise ShapeError("l2_normalize expects a matrix")
    xv = x.value
    norm = np.sqrt(np.sum(xv * xv, axis=1, keepdims=True))
    safe = np.where(norm > eps, norm, 1.0)
    alive = (norm > eps).astype(xv.dtype)
    y = xv / safe * alive

    def backward(g):
        return ((g - y * np.sum(g * y, axis=1, keepdims=True)) / safe * alive,)

    return _make(y, "l2_normalize", (x,), backward)


def cosine_matrix(a, b) -> Node:
    """Pairwise cosine similarities between rows of ``a`` and rows of ``b``."""
    return matmul(l2_normalize(a), transpose(l2_normalize(b)))


def rowwise_cosine(a, b) -> Node:
    a, b = constant(a), constant(b)
    if a.shape != b.shape:
        raise ShapeError(f"rowwise_cosine: {a.shape} vs {b.shape}")
    return sum(l2_normalize(a) * l2_normalize(b), axis=1)


def pairwise_sq_dist(x) -> Node:
    """Matrix of squared euclidean distances between rows of ``x``."""
    x = constant(x)
    sq = sum(x * x, axis=1, keepdims=True)
    return sq + transpose(sq) - 2.0 * matmul(x, transpose(x))


# gradient checking ---------------------------------------------------------

def grad_check(f: Callable[[Node], Node], theta, eps: float = 1e-4, coords=None) -> float:
    """Max relative error between the tape gradient and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    ``coords`` optionally restricts the probe to a subset of flat indices.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    theta = np.array(theta, dtype=np.float64)
    node = Node(theta.copy(), requires_grad=True)
    out = f(node)
    if out.value.size != 1:
        raise ShapeError("grad_check needs a scalar-valued program")
    if not np.isfinite(out.value).all():
        raise NumericError("grad_check", "f(theta) is not finite")
    out.backward()
    analytic = np.zeros_like(theta) if node.grad is None else node.grad.astype(np.float64)

    def evaluate(t):
        with no_grad():
            v = float(f(Node(t)).value)
        if not np.isfinite(v):
            raise NumericError("grad_check", "f is not finite near theta")
        return v

    flat = theta.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for k in idx:
        plus, minus = flat.copy(), flat.copy()
        plus[k] += eps
        minus[k] -= eps
        numeric = (evaluate(plus.reshape(theta.shape)) - evaluate(minus.reshape(theta.shape))) / (2 * eps)
        a = analytic.reshape(-1)[k]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
