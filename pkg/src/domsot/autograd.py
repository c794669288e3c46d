"""Minimal reverse-mode differentiation over numpy arrays.

Only the handful of operations the toy encoder-decoder needs are provided.
Nodes are recorded in creation order, which is already a topological order,
so :meth:`Var.backward` walks the graph once in reverse.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "_order")

    _counter = 0

    def __init__(self, value, parents: Sequence["Var"] = (), backward_fn: Callable | None = None,
                 requires_grad: bool | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        Var._counter += 1
        self._order = Var._counter

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.value)
        nodes = []
        seen = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node.parents)
        nodes.sort(key=lambda n: n._order, reverse=True)
        self._accumulate(grad)
        for node in nodes:
            if node.backward_fn is None or node.grad is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if parent.requires_grad and g is not None:
                    parent._accumulate(g)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(as_var(other), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def param(value) -> Var:
    return Var(value, requires_grad=True)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x, requires_grad=False)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(a.value + b.value, (a, b),
               lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                          _unbroadcast(g, b.shape) if b.requires_grad else None))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(a.value * b.value, (a, b),
               lambda g: (_unbroadcast(g * b.value, a.shape) if a.requires_grad else None,
                          _unbroadcast(g * a.value, b.shape) if b.requires_grad else None))


def matmul(a, b) -> Var:
    """Batched matmul; ``b`` may be a 2-D weight shared across the batch."""
    a, b = as_var(a), as_var(b)

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape)
        if b.requires_grad:
            if b.value.ndim == 2 and a.value.ndim > 2:
                # shared weight: fold batch dims instead of forming per-sample outer products
                gb = a.value.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)
        return ga, gb

    return Var(a.value @ b.value, (a, b), back)


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)
    return Var(out, (a,), lambda g: (g * (1.0 - out * out),))


def reshape(a: Var, shape) -> Var:
    return Var(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a: Var, ax1: int, ax2: int) -> Var:
    return Var(np.swapaxes(a.value, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def sum_(a: Var, axis=None, keepdims: bool = False) -> Var:
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Var(a.value.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a: Var, axis: int) -> Var:
    n = a.shape[axis]
    return mul(sum_(a, axis=axis), 1.0 / n)


def concat(parts: Sequence[Var], axis: int = -1) -> Var:
    parts = [as_var(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return Var(np.concatenate([p.value for p in parts], axis=axis), parts,
               lambda g: tuple(np.split(g, splits, axis=axis)))


def getitem(a: Var, idx) -> Var:
    def back(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return Var(a.value[idx], (a,), back)


def take_rows(table: Var, ids) -> Var:
    """Embedding lookup ``table[ids]``."""
    ids = np.asarray(ids)

    def back(g):
        out = np.zeros_like(table.value)
        np.add.at(out, ids, g)
        return (out,)

    return Var(table.value[ids], (table,), back)


def softmax(a: Var, axis: int = -1, mask: np.ndarray | None = None) -> Var:
    """Softmax along ``axis``; entries where ``mask`` is False get zero weight."""
    x = a.value
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Var(out, (a,), back)


def custom(value, parents: Sequence[Var], grads: Sequence[np.ndarray | None]) -> Var:
    """Scalar-valued node whose local gradients are precomputed.

    Used for losses such as CTC whose gradient comes from a dedicated
    routine rather than from composing primitive ops.
    """
    return Var(value, parents, lambda g: tuple(None if d is None else g * d for d in grads))
