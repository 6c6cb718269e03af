"""Reverse-mode automatic differentiation over numpy arrays.

A computation graph is built by calling the op functions below on ``Node``
objects (raw arrays and floats are wrapped as constants). Every op computes
its value eagerly and records its parents together with one vector-Jacobian
product per parent; ``backward`` on a scalar root then fills ``.grad`` on
every node of the graph, leaves included.

Design constraints:
  * values are float64 throughout, so central finite differences are a
    usable oracle for the whole graph;
  * only smooth ops are provided (tanh, exp, log, sqrt, logsumexp, ...),
    no relu / abs / max, keeping gradients well defined everywhere;
  * graph construction inside ``no_grad()`` produces parentless nodes, so
    long sampling loops do not retain history.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build values only: nodes created inside record no parents."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def grad_enabled():
    """Force recording back on inside a ``no_grad`` region (sub-graphs)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = True
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Node:
    """One recorded value. Treat ``.value`` as immutable once created."""

    __slots__ = ("value", "parents", "vjps", "grad", "name")

    def __init__(self, value, parents=(), vjps=(), name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents: tuple[Node, ...] = parents
        self.vjps: tuple[Callable[[Array], Array], ...] = vjps
        self.grad: Array | None = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Node{tag}(shape={self.value.shape}, leaf={self.is_leaf})"

    # Operator sugar; everything routes through the op functions below.
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value, name: str | None = None) -> Node:
    """Wrap an array as a parentless node (no gradient flows into it)."""
    return Node(value, name=name)


def leaf(value, name: str | None = None) -> Node:
    """A differentiation leaf; identical to ``constant`` but reads better."""
    return Node(value, name=name)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _make(value: Array, parents: tuple[Node, ...], vjps: tuple) -> Node:
    if _GRAD_ENABLED:
        return Node(value, parents, vjps)
    return Node(value)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementary ops
# ---------------------------------------------------------------------------

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return _make(
        a.value + b.value,
        (a, b),
        (lambda g: _unbroadcast(g, a.value.shape),
         lambda g: _unbroadcast(g, b.value.shape)),
    )


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return _make(
        a.value - b.value,
        (a, b),
        (lambda g: _unbroadcast(g, a.value.shape),
         lambda g: _unbroadcast(-g, b.value.shape)),
    )


def neg(a) -> Node:
    a = as_node(a)
    return _make(-a.value, (a,), (lambda g: -g,))


def mul(a, b) -> Node:
    """Elementwise product with numpy broadcasting."""
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    return _make(
        av * bv,
        (a, b),
        (lambda g: _unbroadcast(g * bv, av.shape),
         lambda g: _unbroadcast(g * av, bv.shape)),
    )


def scale(a, c: float) -> Node:
    """Multiply by a python float (no node is created for the scalar)."""
    a = as_node(a)
    c = float(c)
    return _make(a.value * c, (a,), (lambda g: g * c,))


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    return _make(
        av @ bv,
        (a, b),
        (lambda g: g @ bv.T, lambda g: av.T @ g),
    )


def tanh(a) -> Node:
    a = as_node(a)
    y = np.tanh(a.value)
    return _make(y, (a,), (lambda g: g * (1.0 - y * y),))


def exp(a) -> Node:
    a = as_node(a)
    y = np.exp(a.value)
    return _make(y, (a,), (lambda g: g * y,))


def log(a) -> Node:
    a = as_node(a)
    av = a.value
    return _make(np.log(av), (a,), (lambda g: g / av,))


def sqrt(a) -> Node:
    a = as_node(a)
    y = np.sqrt(a.value)
    return _make(y, (a,), (lambda g: g * (0.5 / y),))


def reduce_sum(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    av = a.value
    y = av.sum(axis=axis, keepdims=keepdims)

    def vjp(g: Array) -> Array:
        if axis is None:
            return np.broadcast_to(g, av.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, av.shape).copy()

    return _make(y, (a,), (vjp,))


def mean_all(a) -> Node:
    a = as_node(a)
    return scale(reduce_sum(a), 1.0 / a.value.size)


def square_norm(a, axis=None, keepdims: bool = False) -> Node:
    """Sum of squares, optionally along one axis (per-row norms)."""
    return reduce_sum(mul(a, a), axis=axis, keepdims=keepdims)


def concat(nodes: Sequence, axis: int = 1) -> Node:
    nodes = [as_node(n) for n in nodes]
    values = [n.value for n in nodes]
    y = np.concatenate(values, axis=axis)
    offsets = np.cumsum([0] + [v.shape[axis] for v in values])

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g: Array) -> Array:
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    return _make(y, tuple(nodes), tuple(make_vjp(i) for i in range(len(nodes))))


def gather_cols(a, idx) -> Node:
    """Select columns ``a[:, idx]`` of a 2-D node."""
    a = as_node(a)
    idx = np.asarray(idx, dtype=np.intp)
    av = a.value
    y = av[:, idx]

    def vjp(g: Array) -> Array:
        out = np.zeros_like(av)
        np.add.at(out, (slice(None), idx), g)
        return out

    return _make(y, (a,), (vjp,))


def gather_rowwise(a, idx) -> Node:
    """Per-row column pick ``a[r, idx[r]]`` of a 2-D node, shape (rows, 1)."""
    a = as_node(a)
    idx = np.asarray(idx, dtype=np.intp).reshape(-1)
    av = a.value
    if idx.size != av.shape[0]:
        raise ValueError(f"got {idx.size} indices for {av.shape[0]} rows")
    rows = np.arange(av.shape[0])
    y = av[rows, idx][:, None]

    def vjp(g: Array) -> Array:
        out = np.zeros_like(av)
        out[rows, idx] = g[:, 0]
        return out

    return _make(y, (a,), (vjp,))


def logsumexp(a, axis: int = 1, keepdims: bool = True) -> Node:
    """Numerically stable log-sum-exp along one axis."""
    a = as_node(a)
    av = a.value
    amax = np.max(av, axis=axis, keepdims=True)
    y = np.log(np.sum(np.exp(av - amax), axis=axis, keepdims=True)) + amax
    softmax = np.exp(av - y)
    if not keepdims:
        y = np.squeeze(y, axis=axis)

    def vjp(g: Array) -> Array:
        gg = g if keepdims else np.expand_dims(g, axis)
        return gg * softmax

    return _make(y, (a,), (vjp,))


def stopgrad(a) -> Node:
    """Same forward value, zero adjoint flow: the result is a constant."""
    a = as_node(a)
    return Node(a.value)


detach = stopgrad


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _toposort(root: Node) -> list[Node]:
    """Iterative post-order (parents before node); no recursion limit."""
    seen: set[int] = set()
    order: list[Node] = []
    stack: list[tuple[Node, bool]] = [(root, False)]
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


def backward(root: Node) -> None:
    """Fill ``.grad`` on every node reachable from a scalar ``root``.

    Accumulation happens in a fixed topological order, so gradients are
    bit-reproducible for identical graphs.
    """
    if root.value.size != 1:
        raise ValueError(
            f"backward needs a scalar root, got shape {root.value.shape}"
        )
    order = _toposort(root)
    grads: dict[int, Array] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            # node feeds the root only through stopgrad or not at all
            node.grad = np.zeros_like(node.value) if node.is_leaf else None
            continue
        node.grad = g
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + contrib
            else:
                grads[pid] = contrib


def record_forward(program: Callable[..., Node], *inputs) -> tuple[float, Node]:
    """Run a graph-building program to a scalar root.

    The returned node IS the recorded computation: its parent links hold
    the whole graph, and ``backward`` on it fills the adjoints.
    """
    root = program(*[as_node(x) for x in inputs])
    if not isinstance(root, Node):
        raise TypeError("program must return a Node built from tape ops")
    if root.value.size != 1:
        raise ValueError(
            f"program must produce a scalar, got shape {root.value.shape}"
        )
    return root.value.item(), root


def value_and_grad(f: Callable[..., Node], params: Sequence[Node]):
    """Convenience wrapper: run ``f()``, backprop, return value and grads."""
    root = f()
    backward(root)
    return root.value.item(), [
        p.grad if p.grad is not None else np.zeros_like(p.value) for p in params
    ]


def graph_nbytes(root: Node) -> int:
    """Total bytes held by forward values reachable from ``root``."""
    return sum(n.value.nbytes for n in _toposort(root))
