"""Minimal reverse-mode automatic differentiation over float64 arrays.

Just enough primitives to express an unrolled inner-loop optimization as a
differentiable graph: the inner-loop gradient of a decoder loss is written
in closed form with these ops, so a single reverse pass yields exact
meta-gradients through the whole unrolled trajectory without hand-derived
Hessian-vector products.

Non-Var operands are treated as constants. Gradients accumulate in
``Var.grad`` after ``backward(root)``.
"""

from __future__ import annotations

import numpy as np


class Var:
    __slots__ = ("value", "grad", "parents", "bwd")

    def __init__(self, value, parents=(), bwd=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Var, ...] = parents
        self.bwd = bwd  # callable(out_grad) -> tuple of parent gradients


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` back down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _binary(a, b, value, da, db) -> Var:
    parents = tuple(x for x in (a, b) if isinstance(x, Var))

    def bwd(g):
        grads = []
        if isinstance(a, Var):
            grads.append(_unbroadcast(da(g), a.value.shape))
        if isinstance(b, Var):
            grads.append(_unbroadcast(db(g), b.value.shape))
        return tuple(grads)

    return Var(value, parents, bwd)


def add(a, b) -> Var:
    return _binary(a, b, _val(a) + _val(b), lambda g: g, lambda g: g)


def sub(a, b) -> Var:
    return _binary(a, b, _val(a) - _val(b), lambda g: g, lambda g: -g)


def mul(a, b) -> Var:
    av, bv = _val(a), _val(b)
    return _binary(a, b, av * bv, lambda g: g * bv, lambda g: g * av)


def matmul(a, b) -> Var:
    av, bv = _val(a), _val(b)
    return _binary(
        a, b, av @ bv, lambda g: g @ bv.T, lambda g: av.T @ g
    )


def transpose(a: Var) -> Var:
    return Var(a.value.T, (a,), lambda g: (g.T,))


def neg(a: Var) -> Var:
    return Var(-a.value, (a,), lambda g: (-g,))


def scale(a: Var, c: float) -> Var:
    return Var(a.value * c, (a,), lambda g: (g * c,))


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return Var(out, (a,), lambda g: (g * out,))


def log(a: Var) -> Var:
    return Var(np.log(a.value), (a,), lambda g: (g / a.value,))


def sigmoid(a: Var) -> Var:
    out = 1.0 / (1.0 + np.exp(-a.value))
    return Var(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Var) -> Var:
    # log(1 + exp(x)), stably; derivative is sigmoid(x).
    out = np.logaddexp(0.0, a.value)
    sig = 1.0 / (1.0 + np.exp(-a.value))
    return Var(out, (a,), lambda g: (g * sig,))


def vsum(a: Var, axis=None, keepdims: bool = False) -> Var:
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.value.shape).copy(),)

    return Var(out, (a,), bwd)


def logsumexp(a: Var, axis: int, keepdims: bool = False) -> Var:
    m = a.value.max(axis=axis, keepdims=True)
    out_kd = m + np.log(np.exp(a.value - m).sum(axis=axis, keepdims=True))
    soft = np.exp(a.value - out_kd)
    out = out_kd if keepdims else np.squeeze(out_kd, axis=axis)

    def bwd(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return Var(out, (a,), bwd)


def backward(root: Var) -> None:
    """Reverse pass from a scalar root; fills `.grad` on every reachable Var."""
    if root.value.size != 1:
        raise ValueError("backward expects a scalar root")
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            stack.append((parent, False))

    for node in order:
        node.grad = np.zeros_like(node.value)
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.bwd is None or node.grad is None:
            continue
        for parent, pgrad in zip(node.parents, node.bwd(node.grad)):
            parent.grad = parent.grad + pgrad
