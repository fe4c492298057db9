"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every value in the computation graph is a :class:`Tensor` wrapping an
``np.ndarray``. Ops build a DAG; ``backward()`` runs a topological sweep
accumulating gradients into every node with ``requires_grad``. The engine is
deliberately small: only the ops needed by the encoder and the losses exist,
and all arithmetic is float64.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data)

    def accumulate(self, g):
        if not self.requires_grad:
            return
        g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        """Reverse sweep from this node. Defaults to d(self)/d(self) = 1.

        Interior-node gradients are cleared first; leaf gradients accumulate
        across calls (callers zero them between steps).
        """
        if grad is None:
            grad = np.ones_like(self.data)
        topo = _toposort(self)
        for node in topo:
            if node._parents:
                node.grad = None
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

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

    def __pow__(self, p):
        return powc(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root):
    order, seen, stack = [], set(), [(root, iter(root._parents))]
    seen.add(id(root))
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if id(p) not in seen:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def _unbroadcast(g, shape):
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _op(data, parents, backward):
    parents = tuple(parents)
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


# elementwise ---------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        a.accumulate(g)
        b.accumulate(g)

    return _op(a.data + b.data, (a, b), bwd)


def neg(a):
    a = as_tensor(a)
    return _op(-a.data, (a,), lambda g: a.accumulate(-g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        a.accumulate(g * b.data)
        b.accumulate(g * a.data)

    return _op(a.data * b.data, (a, b), bwd)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        a.accumulate(g / b.data)
        b.accumulate(-g * a.data / (b.data * b.data))

    return _op(a.data / b.data, (a, b), bwd)


def powc(a, p):
    a = as_tensor(a)
    p = float(p)
    return _op(a.data**p, (a,), lambda g: a.accumulate(g * p * a.data ** (p - 1.0)))


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)
    return _op(out_data, (a,), lambda g: a.accumulate(g * out_data))


def log(a):
    a = as_tensor(a)
    return _op(np.log(a.data), (a,), lambda g: a.accumulate(g / a.data))


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)
    return _op(out_data, (a,), lambda g: a.accumulate(g * 0.5 / out_data))


def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)
    return _op(out_data, (a,), lambda g: a.accumulate(g * (1.0 - out_data * out_data)))


def sigmoid(a):
    a = as_tensor(a)
    out_data = expit(a.data)
    return _op(out_data, (a,), lambda g: a.accumulate(g * out_data * (1.0 - out_data)))


def relu(a):
    a = as_tensor(a)
    return _op(np.maximum(a.data, 0.0), (a,), lambda g: a.accumulate(g * (a.data > 0.0)))


def clamp_min(a, lo):
    """max(a, lo) for a scalar floor; the gradient passes where a > lo."""
    a = as_tensor(a)
    lo = float(lo)
    return _op(np.maximum(a.data, lo), (a,), lambda g: a.accumulate(g * (a.data > lo)))


# reductions and shape ops --------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def bwd(g):
        if axis is None:
            a.accumulate(np.broadcast_to(g, a.data.shape))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            a.accumulate(np.broadcast_to(ge, a.data.shape))

    return _op(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) / float(n)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")

    def bwd(g):
        a.accumulate(g @ b.data.T)
        b.accumulate(a.data.T @ g)

    return _op(a.data @ b.data, (a, b), bwd)


def transpose(a):
    a = as_tensor(a)
    return _op(a.data.T, (a,), lambda g: a.accumulate(g.T))


def reshape(a, shape):
    a = as_tensor(a)
    return _op(a.data.reshape(shape), (a,), lambda g: a.accumulate(g.reshape(a.data.shape)))


def concat(parts, axis=0):
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            p.accumulate(piece)

    return _op(np.concatenate([p.data for p in parts], axis=axis), parts, bwd)


def take(a, index):
    """Integer-array indexing ``a[index]`` with scatter-add backward.

    ``index`` is either an integer array (row gather) or a tuple of integer
    arrays (pointwise gather). Repeated indices accumulate.
    """
    a = as_tensor(a)
    if isinstance(index, tuple):
        index = tuple(np.asarray(i) for i in index)
    else:
        index = np.asarray(index)

    def bwd(g):
        if not a.requires_grad:
            return
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        a.accumulate(ga)

    return _op(a.data[index], (a,), bwd)


def logsumexp(a, axis=-1):
    """Stabilized log(sum(exp(a))) along ``axis`` (max treated as constant)."""
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a - m
    return log(tsum(exp(shifted), axis=axis)) + np.squeeze(m, axis=axis)


def l2_normalize(a, eps=1e-12):
    """Rows of ``a`` scaled to unit L2 norm; norms clamped below by eps."""
    a = as_tensor(a)
    norms = sqrt(tsum(a * a, axis=-1, keepdims=True))
    return a / clamp_min(norms, eps)
