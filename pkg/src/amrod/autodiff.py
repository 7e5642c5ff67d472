"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Graph` is built fresh for every forward pass (define-by-run). Every
operation appends one record to the graph's tape, so walking the tape
backwards visits nodes in reverse topological order exactly once.

    g = Graph()
    w = g.param("w", np.array([1.0, 2.0]))
    loss = ad.sum(w * w)
    grads = g.backward(loss)        # {"w": array([2., 4.])}

A graph can be differentiated once; a second :meth:`Graph.backward` raises
:class:`GraphError` instead of silently accumulating.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Graph",
    "GraphError",
    "ShapeError",
    "Tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "relu",
    "exp",
    "log",
    "sigmoid",
    "softplus",
    "softmax",
    "log_softmax",
    "sum",
    "mean",
    "take",
    "rows",
    "reshape",
    "transpose",
    "concat",
    "clamp",
    "square",
    "sqrt",
    "abs",
    "smooth_l1",
    "l2_normalize",
    "cosine_similarity",
]


class GraphError(RuntimeError):
    """Misuse of a graph: non-scalar loss, repeated backward, foreign tensors."""


class ShapeError(ValueError):
    """Incompatible operand shapes for an operation."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' and '.join(str(s) for s in shapes)}")


class Tensor:
    """A node on a :class:`Graph`. Holds an immutable forward value."""

    __slots__ = ("data", "graph", "index", "requires_grad", "name")

    def __init__(self, data: np.ndarray, graph: "Graph", index: int, requires_grad: bool, name: str | None = None):
        self.data = data
        self.graph = graph
        self.index = index
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def grad(self) -> np.ndarray | None:
        return self.graph.grad_of(self)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    __array_priority__ = 100.0

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


_Backward = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Graph:
    """Tape of recorded operations plus the named parameter leaves."""

    def __init__(self) -> None:
        self._data: list[np.ndarray] = []
        self._parents: list[tuple[int, ...]] = []
        self._backward: list[_Backward | None] = []
        self._rg: list[bool] = []
        self._params: dict[str, Tensor] = {}
        self._grads: list[np.ndarray | None] | None = None
        self._consumed = False

    def __len__(self) -> int:
        return len(self._data)

    @property
    def params(self) -> dict[str, Tensor]:
        return dict(self._params)

    def param(self, name: str, value) -> Tensor:
        """Register a differentiable leaf; its gradient is reported under ``name``."""
        if name in self._params:
            raise GraphError(f"parameter {name!r} registered twice")
        t = self._push(np.array(value, dtype=np.float64), (), None, True)
        t.name = name
        self._params[name] = t
        return t

    def constant(self, value) -> Tensor:
        return self._push(np.asarray(value, dtype=np.float64), (), None, False)

    def _push(self, data: np.ndarray, parents: tuple[int, ...], backward: _Backward | None, requires_grad: bool) -> Tensor:
        if self._consumed:
            raise GraphError("graph already differentiated; build a new graph")
        self._data.append(data)
        self._parents.append(parents)
        self._backward.append(backward if requires_grad else None)
        self._rg.append(requires_grad)
        return Tensor(data, self, len(self._data) - 1, requires_grad)

    def record(self, data: np.ndarray, inputs: Sequence[Tensor], backward: _Backward) -> Tensor:
        """Append an op result. ``backward`` maps the output gradient to one gradient per input."""
        requires_grad = any(t.requires_grad for t in inputs)
        return self._push(data, tuple(t.index for t in inputs), backward, requires_grad)

    def grad_of(self, t: Tensor) -> np.ndarray | None:
        if self._grads is None:
            return None
        g = self._grads[t.index]
        if g is None:
            return np.zeros_like(self._data[t.index])
        return g

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Differentiate a scalar node; returns d loss / d param for every registered parameter."""
        if loss.graph is not self:
            raise GraphError("loss belongs to a different graph")
        if self._consumed:
            raise GraphError("backward() already called on this graph")
        if loss.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        grads: list[np.ndarray | None] = [None] * len(self._data)
        grads[loss.index] = np.ones_like(self._data[loss.index])
        for i in range(loss.index, -1, -1):
            g = grads[i]
            fn = self._backward[i]
            if g is None or fn is None:
                continue
            for p, pg in zip(self._parents[i], fn(g)):
                if pg is None or not self._rg[p]:
                    continue
                if grads[p] is None:
                    grads[p] = pg
                else:
                    grads[p] = grads[p] + pg
        self._grads = grads
        out = {}
        for name, t in self._params.items():
            g = grads[t.index]
            out[name] = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape)
        return out


# --------------------------------------------------------------------- helpers


def _as_tensor(x, graph: Graph) -> Tensor:
    if isinstance(x, Tensor):
        if x.graph is not graph:
            raise GraphError("operands belong to different graphs")
        return x
    return graph.constant(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a.graph)
    if isinstance(b, Tensor):
        return _as_tensor(a, b.graph), b
    raise GraphError("at least one operand must be a Tensor")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ------------------------------------------------------------ arithmetic ops


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return a.graph.record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return a.graph.record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    ad_, bd = a.data, b.data
    return a.graph.record(
        ad_ * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad_.shape), _unbroadcast(g * ad_, bd.shape))
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    ad_, bd = a.data, b.data
    out = ad_ / bd
    return a.graph.record(
        out, (a, b), lambda g: (_unbroadcast(g / bd, ad_.shape), _unbroadcast(-g * out / bd, bd.shape))
    )


def neg(a: Tensor) -> Tensor:
    return a.graph.record(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad_, bd = a.data, b.data
    return a.graph.record(ad_ @ bd, (a, b), lambda g: (g @ bd.T, ad_.T @ g))


# ------------------------------------------------------------- elementwise


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return a.graph.record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return a.graph.record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return a.graph.record(np.log(x), (a,), lambda g: (g / x,))


def sigmoid(a: Tensor) -> Tensor:
    out = _np_sigmoid(a.data)
    return a.graph.record(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    x = a.data
    out = np.logaddexp(0.0, x)
    return a.graph.record(out, (a,), lambda g: (g * _np_sigmoid(x),))


def square(a: Tensor) -> Tensor:
    x = a.data
    return a.graph.record(x * x, (a,), lambda g: (2.0 * g * x,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return a.graph.record(out, (a,), lambda g: (g * 0.5 / out,))


def abs(a: Tensor) -> Tensor:  # noqa: A001
    s = np.sign(a.data)
    return a.graph.record(np.abs(a.data), (a,), lambda g: (g * s,))


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to ``[lo, hi]``; zero gradient where clipping is active."""
    x = a.data
    out = np.clip(x, lo, hi)
    active = np.ones(x.shape, dtype=bool)
    if lo is not None:
        active &= x >= lo
    if hi is not None:
        active &= x <= hi
    return a.graph.record(out, (a,), lambda g: (g * active,))


def smooth_l1(a: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style loss: 0.5 x^2 / beta inside |x| < beta, |x| - 0.5 beta outside."""
    x = a.data
    ax = np.abs(x)
    inside = ax < beta
    out = np.where(inside, 0.5 * x * x / beta, ax - 0.5 * beta)
    return a.graph.record(out, (a,), lambda g: (g * np.where(inside, x / beta, np.sign(x)),))


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


# -------------------------------------------------------------- reductions


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.graph.record(np.asarray(out), (a,), back)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("mean", a.shape)
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return a.graph.record(out, (a,), back)


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return a.graph.record(out, (a,), back)


# ---------------------------------------------------------- shape / gather


def take(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather from the flattened input. Entries of ``index`` equal to -1 produce 0.

    This is the building block for im2col convolution with zero padding.
    """
    index = np.asarray(index, dtype=np.intp)
    flat = a.data.reshape(-1)
    size = flat.size
    if index.size and (index.max() >= size or index.min() < -1):
        raise ShapeError("take", a.shape, index.shape)
    valid = index >= 0
    padded = np.concatenate([flat, [0.0]])
    out = padded[np.where(valid, index, size)]
    shape = a.shape
    vidx = index[valid]

    def back(g):
        gi = np.bincount(vidx, weights=g[valid], minlength=size)
        return (gi.reshape(shape),)

    return a.graph.record(out, (a,), back)


def rows(a: Tensor, index) -> Tensor:
    """Select along the first axis with an integer index array or slice."""
    out = a.data[index]
    shape = a.shape

    def back(g):
        gi = np.zeros(shape)
        np.add.at(gi, index, g)
        return (gi,)

    return a.graph.record(out, (a,), back)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return a.graph.record(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return a.graph.record(a.data.T, (a,), lambda g: (g.T,))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    graph = next(p.graph for p in parts if isinstance(p, Tensor))
    parts = [_as_tensor(p, graph) for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(p.shape for p in parts)) from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return graph.record(out, parts, lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------- composite


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row (last axis) to unit Euclidean length."""
    norm = sqrt(add(sum(square(a), axis=-1, keepdims=True), eps))
    return div(a, norm)


def cosine_similarity(a: Tensor, b) -> Tensor:
    """Row-wise cosine similarity of two [n, d] tensors -> [n]."""
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise ShapeError("cosine_similarity", a.shape, b.shape)
    return sum(mul(l2_normalize(a), l2_normalize(b)), axis=-1)
