"""Small reverse-mode automatic differentiation engine.

Values are float64 numpy arrays of rank 0, 1 or 2. Every operation returns a
new :class:`Node` that remembers, for each differentiable parent, a closure
mapping the output adjoint to that parent's adjoint contribution. The graph
is owned by whoever holds the loss node and is released with it.

Example::

    x = variable(3.0, name="x")
    y = x * x
    grads = backward(y, [x])   # {x: array(6.)}
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit, gammaln

__all__ = [
    "Node",
    "constant",
    "variable",
    "as_node",
    "no_grad",
    "is_recording",
    "backward",
    "stop_gradient",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "square",
    "cos",
    "sin",
    "sigmoid",
    "sum",
    "mean",
    "maximum",
    "minimum",
    "clip",
    "where",
    "gather",
    "concat",
    "stack",
    "reshape",
    "logsumexp",
    "log_softmax",
    "psd_sqrt",
    "poisson_pmf",
    "surrogate",
    "glorot_normal_init",
]

MAX_RANK = 2

_counter = itertools.count()
_state = threading.local()


def is_recording() -> bool:
    return getattr(_state, "recording", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording parents. Forward values are unchanged."""
    previous = is_recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = previous


VJP = Callable[[np.ndarray], np.ndarray]


class Node:
    """A value in the computation graph."""

    __slots__ = ("value", "parents", "requires_grad", "index", "name", "__weakref__")
    # make numpy defer to the reflected Node operators
    __array_ufunc__ = None

    def __init__(self, value, parents: tuple = (), requires_grad: bool = False, name: str | None = None):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim > MAX_RANK:
            raise ValueError(f"tensors of rank {value.ndim} are not supported (max rank {MAX_RANK})")
        self.value = value
        self.parents = parents
        self.requires_grad = requires_grad
        self.index = next(_counter)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Node":
        return transpose(self)

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Node{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __getitem__(self, key):
        return getitem(self, key)


def constant(value) -> Node:
    return Node(value)


def variable(value, name: str | None = None) -> Node:
    """A trainable leaf."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _make(value, parents: Iterable[tuple[Node, VJP]]) -> Node:
    if not is_recording():
        return Node(value)
    live = tuple((p, f) for p, f in parents if p.requires_grad)
    return Node(value, live, bool(live))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: Node, b: Node) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: operand shapes {a.shape} and {b.shape} do not broadcast") from None


# --------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("add", a, b)
    return _make(
        a.value + b.value,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))],
    )


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("sub", a, b)
    return _make(
        a.value - b.value,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(-g, b.shape))],
    )


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("mul", a, b)
    return _make(
        a.value * b.value,
        [
            (a, lambda g: _unbroadcast(g * b.value, a.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.shape)),
        ],
    )


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("div", a, b)
    out = a.value / b.value
    return _make(
        out,
        [
            (a, lambda g: _unbroadcast(g / b.value, a.shape)),
            (b, lambda g: _unbroadcast(-g * out / b.value, b.shape)),
        ],
    )


def neg(a) -> Node:
    a = as_node(a)
    return _make(-a.value, [(a, lambda g: -g)])


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ValueError("matmul: operands must have rank 1 or 2, use mul for scalars")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def grad_a(g):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T
        if av.ndim == 2:
            return np.outer(g, bv)
        if bv.ndim == 2:
            return bv @ g
        return g * bv

    def grad_b(g):
        if av.ndim == 2 and bv.ndim == 2:
            return av.T @ g
        if av.ndim == 2:
            return av.T @ g
        if bv.ndim == 2:
            return np.outer(av, g)
        return g * av

    return _make(av @ bv, [(a, grad_a), (b, grad_b)])


# --------------------------------------------------------------------------
# elementwise functions


def tanh(a) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)
    return _make(out, [(a, lambda g: g * (1.0 - out * out))])


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return _make(out, [(a, lambda g: g * out)])


def log(a) -> Node:
    a = as_node(a)
    if np.any(a.value <= 0):
        raise ValueError("log: input has non-positive entries")
    return _make(np.log(a.value), [(a, lambda g: g / a.value)])


def sqrt(a) -> Node:
    a = as_node(a)
    if np.any(a.value <= 0):
        raise ValueError("sqrt: input has non-positive entries")
    out = np.sqrt(a.value)
    return _make(out, [(a, lambda g: g / (2.0 * out))])


def square(a) -> Node:
    a = as_node(a)
    return _make(a.value * a.value, [(a, lambda g: 2.0 * g * a.value)])


def cos(a) -> Node:
    a = as_node(a)
    return _make(np.cos(a.value), [(a, lambda g: -g * np.sin(a.value))])


def sin(a) -> Node:
    a = as_node(a)
    return _make(np.sin(a.value), [(a, lambda g: g * np.cos(a.value))])


def sigmoid(a) -> Node:
    a = as_node(a)
    out = expit(a.value)
    return _make(out, [(a, lambda g: g * out * (1.0 - out))])


def maximum(a, b) -> Node:
    """Elementwise max; at ties the adjoint goes to ``a``."""
    a, b = as_node(a), as_node(b)
    shape = _check_broadcast("maximum", a, b)
    pick_a = np.broadcast_to(a.value >= b.value, shape)
    return _make(
        np.maximum(a.value, b.value),
        [
            (a, lambda g: _unbroadcast(np.where(pick_a, g, 0.0), a.shape)),
            (b, lambda g: _unbroadcast(np.where(pick_a, 0.0, g), b.shape)),
        ],
    )


def minimum(a, b) -> Node:
    return neg(maximum(neg(a), neg(b)))


def clip(a, lo: float, hi: float) -> Node:
    return minimum(maximum(a, lo), hi)


def where(mask, a, b) -> Node:
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    a, b = as_node(a), as_node(b)
    mask = np.asarray(mask, dtype=bool)
    shape = np.broadcast_shapes(mask.shape, a.shape, b.shape)
    m = np.broadcast_to(mask, shape)
    return _make(
        np.where(m, a.value, b.value),
        [
            (a, lambda g: _unbroadcast(np.where(m, g, 0.0), a.shape)),
            (b, lambda g: _unbroadcast(np.where(m, 0.0, g), b.shape)),
        ],
    )


def stop_gradient(a) -> Node:
    """Identity forward, zero adjoint backward."""
    a = as_node(a)
    return Node(a.value)


def surrogate(value, gradient) -> Node:
    """Forward value of ``value`` with the gradient of ``gradient``."""
    gradient = as_node(gradient)
    return add(stop_gradient(value), sub(gradient, stop_gradient(gradient)))


# --------------------------------------------------------------------------
# reductions and shape manipulation


def sum(a, axis: int | None = None, keepdims: bool = False) -> Node:  # noqa: A001
    a = as_node(a)
    shape = a.shape

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return _make(np.sum(a.value, axis=axis, keepdims=keepdims), [(a, grad)])


def mean(a, axis: int | None = None, keepdims: bool = False) -> Node:
    a = as_node(a)
    count = a.value.size if axis is None else a.shape[axis]
    return div(sum(a, axis=axis, keepdims=keepdims), float(count))


def transpose(a) -> Node:
    a = as_node(a)
    return _make(a.value.T, [(a, lambda g: g.T)])


def reshape(a, shape) -> Node:
    a = as_node(a)
    return _make(a.value.reshape(shape), [(a, lambda g: g.reshape(a.shape))])


def getitem(a, key) -> Node:
    a = as_node(a)

    def grad(g):
        out = np.zeros(a.shape)
        np.add.at(out, key, g)
        return out

    return _make(a.value[key], [(a, grad)])


def gather(a, idx) -> Node:
    """Pick entries along the last axis: ``out[..., k] = a[..., idx[..., k]]``."""
    a = as_node(a)
    idx = np.asarray(idx, dtype=np.intp)
    if a.ndim == 1:
        if idx.ndim != 1:
            raise ValueError("gather: 1-d input needs a 1-d index")
        value = a.value[idx]
        key = (idx,)
    elif a.ndim == 2:
        if idx.ndim != 2 or idx.shape[0] != a.shape[0]:
            raise ValueError(f"gather: index shape {idx.shape} incompatible with {a.shape}")
        rows = np.broadcast_to(np.arange(a.shape[0])[:, None], idx.shape)
        value = a.value[rows, idx]
        key = (rows, idx)
    else:
        raise ValueError("gather: input must have rank 1 or 2")

    def grad(g):
        out = np.zeros(a.shape)
        np.add.at(out, key, g)
        return out

    return _make(value, [(a, grad)])


def concat(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    bounds = np.cumsum([0] + sizes)
    parents = []
    for i, n in enumerate(nodes):
        lo, hi = bounds[i], bounds[i + 1]

        def grad(g, lo=lo, hi=hi):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        parents.append((n, grad))
    return _make(np.concatenate([n.value for n in nodes], axis=axis), parents)


def stack(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    parents = [(n, lambda g, i=i: np.take(g, i, axis=axis)) for i, n in enumerate(nodes)]
    return _make(np.stack([n.value for n in nodes], axis=axis), parents)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Node:
    a = as_node(a)
    top = np.max(a.value, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    shifted = np.exp(a.value - top)
    total = np.sum(shifted, axis=axis, keepdims=True)
    out = np.log(total) + top
    soft = shifted / total

    def grad(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return g * soft

    return _make(out if keepdims else np.squeeze(out, axis=axis), [(a, grad)])


def log_softmax(a, axis: int = -1) -> Node:
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


# --------------------------------------------------------------------------
# special operations


def _sqrt_factor(mats: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    sym = 0.5 * (mats + np.swapaxes(mats, -1, -2))
    eigval, eigvec = np.linalg.eigh(sym)
    root = np.sqrt(np.clip(eigval, 0.0, None))
    return eigvec, root, (eigvec * root[..., None, :]) @ np.swapaxes(eigvec, -1, -2)


def psd_sqrt(a, dim: int) -> Node:
    """Symmetric square root of row-flattened ``dim x dim`` matrices.

    ``a`` has shape ``(dim*dim,)`` or ``(B, dim*dim)``. Negative eigenvalues
    are clamped to zero; directions with zero eigenvalue receive no adjoint.
    """
    a = as_node(a)
    mats = a.value.reshape(-1, dim, dim)
    vec, root, sq = _sqrt_factor(mats)
    vec_t = np.swapaxes(vec, -1, -2)
    denom = root[:, :, None] + root[:, None, :]

    def grad(g):
        inner = vec_t @ g.reshape(-1, dim, dim) @ vec
        inner = np.divide(inner, denom, out=np.zeros_like(inner), where=denom > 0)
        x = vec @ inner @ vec_t
        return (0.5 * (x + np.swapaxes(x, -1, -2))).reshape(a.shape)

    return _make(sq.reshape(a.shape), [(a, grad)])


def _poisson_pmf_value(y: np.ndarray, mean: np.ndarray) -> np.ndarray:
    safe = np.where(mean > 0, mean, 1.0)
    logp = -mean + y * np.log(safe) - gammaln(y + 1.0)
    out = np.exp(logp)
    return np.where(mean > 0, out, (y == 0).astype(np.float64))


def poisson_pmf(y, mean) -> Node:
    """Poisson mass ``e^-m m^y / y!`` for constant integer counts ``y``."""
    mean = as_node(mean)
    y = np.asarray(y, dtype=np.float64)
    if np.any(y < 0) or np.any(y != np.floor(y)):
        raise ValueError("poisson_pmf: counts must be non-negative integers")
    if np.any(mean.value < 0):
        raise ValueError("poisson_pmf: mean must be non-negative")
    shape = _check_broadcast("poisson_pmf", Node(y), mean)
    value = _poisson_pmf_value(y, mean.value)
    # d/dm P(y; m) = P(y-1; m) - P(y; m), with P(-1; m) = 0
    below = np.where(y >= 1, _poisson_pmf_value(np.maximum(y - 1.0, 0.0), mean.value), 0.0)
    slope = np.broadcast_to(below - value, shape)
    return _make(value, [(mean, lambda g: _unbroadcast(g * slope, mean.shape))])


# --------------------------------------------------------------------------
# reverse pass


def _topological(root: Node) -> list[Node]:
    seen = {root.index: root}
    stack = [root]
    while stack:
        node = stack.pop()
        for parent, _ in node.parents:
            if parent.index not in seen:
                seen[parent.index] = parent
                stack.append(parent)
    return [seen[i] for i in sorted(seen, reverse=True)]


def backward(loss: Node, variables: Sequence[Node]) -> dict[Node, np.ndarray]:
    """Adjoints of a scalar ``loss`` with respect to ``variables``.

    Adjoints are accumulated in decreasing node-index order, so the result
    is bit-reproducible for a given graph. Unreachable variables get zeros.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    adjoints: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        adjoints[loss.index] = np.ones_like(loss.value)
        for node in _topological(loss):
            g = adjoints.get(node.index)
            if g is None:
                continue
            for parent, vjp in node.parents:
                contribution = vjp(g)
                prev = adjoints.get(parent.index)
                adjoints[parent.index] = contribution if prev is None else prev + contribution
    out = {}
    for var in variables:
        g = adjoints.get(var.index)
        out[var] = np.zeros(var.shape) if g is None else np.array(g, dtype=np.float64).reshape(var.shape)
    return out


def glorot_normal_init(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Normal entries with variance ``2 / (rows + cols)``."""
    if rows <= 0 or cols <= 0:
        raise ValueError(f"glorot_normal_init: dimensions must be positive, got ({rows}, {cols})")
    return rng.normal(0.0, np.sqrt(2.0 / (rows + cols)), size=(rows, cols))
