"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` remembers the tensors it was computed from and a closure
that pushes its gradient back to them. ``loss.backward()`` walks the graph in
reverse topological order. Leaves created with a ``grad`` buffer accumulate
into that buffer, which lets parameters share one flat gradient vector.

Float32 data stays float32 (training runs there for speed); anything else is
promoted to float64. Constants are plain Python floats so they never promote.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=None, grad=None):
        data = np.asarray(data)
        if data.dtype != np.float32:
            data = data.astype(np.float64, copy=False)
        self.data = data
        self.parents = parents
        self.backward_fn = backward_fn
        if requires_grad is None:
            requires_grad = grad is not None or any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        self.grad = grad

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    def backward(self):
        """Backpropagate from this scalar tensor into every leaf that requires grad."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.data.shape}")
        if not self.requires_grad:
            raise RuntimeError("tensor does not depend on any parameter")
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        # interior gradients are reset so a graph can only be replayed from scratch
        for node in order:
            if node.parents:
                node.grad = None
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)

    # arithmetic ------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return reduce_sum(self, axis, keepdims) * (1.0 / n)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor(a.data + b.data, (a, b), backward)


def neg(a) -> Tensor:
    def backward(g):
        a._accumulate(-g)

    return Tensor(-a.data, (a,), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor(a.data * b.data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor(a.data @ b.data, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    out = a.data ** exponent

    def backward(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1))

    return Tensor(out, (a,), backward)


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return Tensor(out, (a,), backward)


def getitem(a, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        a._accumulate(full)

    return Tensor(out, (a,), backward)


def concat_rows(parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, sizes[:-1], sizes[1:]):
            if p.requires_grad:
                p._accumulate(g[lo:hi])

    return Tensor(np.concatenate([p.data for p in parts], axis=0), tuple(parts), backward)


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    x2 = x * x
    th = x2 * _GELU_A
    th += 1.0
    th *= x
    th *= _GELU_C
    np.tanh(th, out=th)
    out = th + 1.0
    out *= x
    out *= 0.5

    def backward(g):
        # d/dx = 0.5 (1 + th) + 0.5 x (1 - th^2) c (1 + 3 a x^2)
        sech2 = 1.0 - th * th
        dinner = x2 * (3 * _GELU_A)
        dinner += 1.0
        dinner *= sech2
        dinner *= x
        dinner *= 0.5 * _GELU_C
        dinner += 0.5 * (1.0 + th)
        dinner *= g
        a._accumulate(dinner)

    return Tensor(out, (a,), backward)


def tanh(a) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - out * out))

    return Tensor(out, (a,), backward)


def identity(a) -> Tensor:
    return a


def log_softmax(a) -> Tensor:
    """Row-wise log-softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def backward(g):
        p = np.exp(out)
        a._accumulate(g - p * g.sum(axis=-1, keepdims=True))

    return Tensor(out, (a,), backward)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Zero mean, unit variance over the last axis (biased variance, ``eps`` inside the root)."""
    x = a.data
    centered = x - x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    y = centered * inv

    def backward(g):
        dx = g - g.mean(axis=-1, keepdims=True)
        dx -= y * (g * y).mean(axis=-1, keepdims=True)
        dx *= inv
        a._accumulate(dx)

    return Tensor(y, (a,), backward)


ACTIVATIONS = {"gelu": gelu, "tanh": tanh, "identity": identity}
