"""Reverse-mode autodiff over float64 numpy arrays.

Each :class:`Var` keeps its parents together with a vector-Jacobian closure.
:func:`backward` walks the graph in reverse topological order. Only the ops
the layer and trainer need are provided.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

from . import tensor
from .soft_topk import EpsSchedule, soft_topk_vjp


class Var:
    __slots__ = ("value", "parents", "name", "requires_grad")

    def __init__(self, value, parents: tuple = (), name: str | None = None, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(p for p in parents if p[0].requires_grad)
        self.requires_grad = requires_grad or bool(self.parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(shape={self.shape}, name={self.name!r})"


def const(value) -> Var:
    return Var(value)


def leaf(value, name: str | None = None) -> Var:
    """A differentiable input."""
    return Var(value, name=name, requires_grad=True)


def _lift(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    return Var(a.value + b.value, (
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ))


def neg(a: Var) -> Var:
    return Var(-a.value, ((a, lambda g: -g),))


def mul(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    return Var(a.value * b.value, (
        (a, lambda g: _unbroadcast(g * b.value, a.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.shape)),
    ))


def matmul(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    out = tensor.matmul(a.value, b.value)

    def grad_a(g):
        return _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape)

    def grad_b(g):
        return _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape)

    return Var(out, ((a, grad_a), (b, grad_b)))


def relu(a: Var) -> Var:
    mask = a.value > 0
    return Var(np.where(mask, a.value, 0.0), ((a, lambda g: g * mask),))


def sigmoid(a: Var) -> Var:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return Var(y, ((a, lambda g: g * y * (1.0 - y)),))


def reshape(a: Var, shape) -> Var:
    return Var(a.value.reshape(shape), ((a, lambda g: g.reshape(a.shape)),))


def swapaxes(a: Var, ax1: int, ax2: int) -> Var:
    return Var(np.swapaxes(a.value, ax1, ax2), ((a, lambda g: np.swapaxes(g, ax1, ax2)),))


def expand_last(a: Var) -> Var:
    return reshape(a, a.shape + (1,))


def mean(a: Var, axis: int) -> Var:
    n = a.shape[axis]

    def grad(g):
        return np.repeat(np.expand_dims(g, axis), n, axis=axis) / n

    return Var(a.value.mean(axis=axis), ((a, grad),))


def sum_all(a: Var) -> Var:
    return Var(a.value.sum(), ((a, lambda g: np.broadcast_to(g, a.shape).copy()),))


def softmax(a: Var) -> Var:
    y = tensor.row_softmax(a.value)

    def grad(g):
        return y * (g - (g * y).sum(axis=-1, keepdims=True))

    return Var(y, ((a, grad),))


def layer_norm(x: Var, gain: Var, bias: Var, eps: float = tensor.DEFAULT_LN_EPS) -> Var:
    mu = x.value.mean(axis=-1, keepdims=True)
    centered = x.value - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    y = xhat * gain.value + bias.value

    def grad_x(g):
        gx = g * gain.value
        return inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))

    return Var(y, (
        (x, grad_x),
        (gain, lambda g: _unbroadcast(g * xhat, gain.shape)),
        (bias, lambda g: _unbroadcast(g, bias.shape)),
    ))


def gather_rows(x: Var, idx: np.ndarray) -> Var:
    """Rows ``idx[..., i]`` of ``x`` (last two axes are rows, cols)."""
    take = idx[..., None]
    out = np.take_along_axis(x.value, take, axis=-2)

    def grad(g):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, take, g, axis=-2)
        return gx

    return Var(out, ((x, grad),))


def scatter_rows(z: Var, idx: np.ndarray, n: int) -> Var:
    """Place row ``i`` of ``z`` at row ``idx[..., i]`` of an ``n``-row zero matrix."""
    take = idx[..., None]
    out = np.zeros(z.shape[:-2] + (n, z.shape[-1]))
    np.put_along_axis(out, take, z.value, axis=-2)
    return Var(out, ((z, lambda g: np.take_along_axis(g, take, axis=-2)),))


def soft_topk(s: Var, k: int, sched: EpsSchedule) -> Var:
    lam, vjp = soft_topk_vjp(s.value, k, sched)
    return Var(lam, ((s, vjp),))


def cross_entropy(logits: Var, labels: np.ndarray) -> Var:
    """Mean softmax cross-entropy over the leading axis."""
    p = tensor.row_softmax(logits.value)
    rows = np.arange(labels.shape[0])
    loss = -np.mean(np.log(p[rows, labels] + 1e-300))

    def grad(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        return g * d / labels.shape[0]

    return Var(loss, ((logits, grad),))


def _topo(root: Var) -> list[Var]:
    order, seen = [], set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Var, seed=None, wrt: Iterable[Var] = ()) -> dict[int, np.ndarray]:
    """Propagate ``seed`` (default ones) from ``root``; returns grads keyed by ``id(var)``.

    Every var in ``wrt`` gets an entry, zero when unreachable.
    """
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape) if seed is None else np.asarray(seed, dtype=np.float64)}
    for node in reversed(_topo(root)):
        g = grads.get(id(node))
        if g is None or not node.parents:
            continue
        for parent, fn in node.parents:
            contrib = fn(g)
            prev = grads.get(id(parent))
            grads[id(parent)] = contrib if prev is None else prev + contrib
    for v in wrt:
        grads.setdefault(id(v), np.zeros(v.shape))
    return grads

