"""Reverse-mode autodiff on top of numpy arrays.

A ``Tensor`` produced by an op remembers its parents and a closure that maps the
output gradient to parent gradients. ``backward`` walks that graph in reverse
topological order. Recording is switched off inside ``no_grad()``.
"""

from __future__ import annotations

import contextlib

import numpy as np

from ..errors import ShapeError, StateError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{label})"

    def zero_grad(self):
        self.grad = None

    # arithmetic sugar; the ops module holds the real definitions
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        from . import ops
        return ops.add(self, ops.mul(other, -1.0))

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def backward(self, grad=None):
        return backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data, parents, backward_fn) -> Tensor:
    """Wrap an op output and record it on the tape when any parent needs grads."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor, grad=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Returns a dict mapping each leaf tensor that requires grad to its gradient.
    """
    if loss._backward is None:
        raise StateError(
            "backward called on a tensor with no recorded forward pass"
        )
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError(
                f"implicit gradient needs a scalar output, got shape {loss.data.shape}"
            )
        grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=loss.data.dtype)
        if grad.shape != loss.data.shape:
            raise ShapeError(f"gradient shape {grad.shape} != output shape {loss.data.shape}")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): grad}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            leaves[id(node)] = node
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = _unbroadcast(pg, p.data.shape)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return {node: node.grad for node in leaves.values()}
