"""Minimal reverse-mode automatic differentiation over numpy arrays.

A ``Var`` wraps an ndarray and records the closure that routes output
gradients back to its parents; ``backward()`` walks the tape in reverse
topological order. Only what the training path needs is implemented:
broadcast arithmetic, (stacked) matmul, a few elementwise transcendentals,
reductions, shape ops, and indexed gather.

The functional helpers (``exp``, ``matmul``, ``softmax_last`` ...) accept
either ``Var`` or plain ndarray and return the same kind, so model formulas
are written once and run with or without gradient tracking.
"""

from __future__ import annotations

import numpy as np

from .errors import UsageError


class Var:
    """Node in the reverse-mode tape; ``data`` is a numpy array."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self) -> None:
        if self.data.size != 1:
            raise UsageError("backward() requires a scalar root")
        order = _toposort(self)
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar delegates to the module-level helpers below.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def __repr__(self):
        return f"Var(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _toposort(root: Var) -> list:
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def is_var(x) -> bool:
    return isinstance(x, Var)


def _any_var(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def _lift(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x))


def _node(data, parents, backward) -> Var:
    out = Var(data)
    tracked = tuple(p for p in parents if p.requires_grad or p._parents)
    if tracked:
        out._parents = tracked
        out._backward = backward
        out.requires_grad = True
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b):
    if not _any_var(a, b):
        return np.asarray(a) + np.asarray(b)
    a, b = _lift(a), _lift(b)
    data = a.data + b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _node(data, (a, b), backward)


def mul(a, b):
    if not _any_var(a, b):
        return np.asarray(a) * np.asarray(b)
    a, b = _lift(a), _lift(b)
    data = a.data * b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), backward)


def div(a, b):
    if not _any_var(a, b):
        return np.asarray(a) / np.asarray(b)
    a, b = _lift(a), _lift(b)
    data = a.data / b.data

    def backward(g):
        a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(data, (a, b), backward)


def matmul(a, b):
    if not _any_var(a, b):
        return np.asarray(a) @ np.asarray(b)
    a, b = _lift(a), _lift(b)
    a_vec, b_vec = a.data.ndim == 1, b.data.ndim == 1
    if a_vec or b_vec:
        # promote vectors to matrices so the 2-D gradient rule applies
        a2 = reshape(a, (1, -1)) if a_vec else a
        b2 = reshape(b, (-1, 1)) if b_vec else b
        out = matmul(a2, b2)
        shape = list(out.data.shape)
        if a_vec:
            shape = shape[:-2] + shape[-1:]
        if b_vec:
            shape = shape[:-1]
        return reshape(out, tuple(shape))
    data = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        a._accumulate(_unbroadcast(ga, a.data.shape))
        b._accumulate(_unbroadcast(gb, b.data.shape))

    return _node(data, (a, b), backward)


def exp(x):
    if not is_var(x):
        return np.exp(x)
    data = np.exp(x.data)

    def backward(g):
        x._accumulate(g * data)

    return _node(data, (x,), backward)


def log(x):
    if not is_var(x):
        return np.log(x)
    data = np.log(x.data)

    def backward(g):
        x._accumulate(g / x.data)

    return _node(data, (x,), backward)


def sqrt(x):
    if not is_var(x):
        return np.sqrt(x)
    data = np.sqrt(x.data)

    def backward(g):
        x._accumulate(g * 0.5 / data)

    return _node(data, (x,), backward)


def tanh(x):
    if not is_var(x):
        return np.tanh(x)
    data = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - data * data))

    return _node(data, (x,), backward)


def power(x, p: float):
    """x ** p for a constant exponent; p == 0 short-circuits to ones."""
    if p == 0:
        one = np.ones_like(x.data if is_var(x) else np.asarray(x))
        return Var(one) if is_var(x) else one
    if not is_var(x):
        return np.asarray(x) ** p
    data = x.data**p

    def backward(g):
        x._accumulate(g * p * x.data ** (p - 1))

    return _node(data, (x,), backward)


def clip(x, lo: float, hi: float):
    """Clamp with straight-through gradient inside [lo, hi], zero outside."""
    if not is_var(x):
        return np.clip(x, lo, hi)
    data = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        x._accumulate(g * mask)

    return _node(data, (x,), backward)


def maximum(x, threshold: float):
    """max(x, threshold) against a scalar; gradient flows where x > threshold."""
    if not is_var(x):
        return np.maximum(x, threshold)
    data = np.maximum(x.data, threshold)
    mask = x.data > threshold

    def backward(g):
        x._accumulate(g * mask)

    return _node(data, (x,), backward)


def sum_(x, axis=None, keepdims: bool = False):
    if not is_var(x):
        return np.sum(x, axis=axis, keepdims=keepdims)
    data = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        x._accumulate(np.broadcast_to(g, x.data.shape).copy())

    return _node(data, (x,), backward)


def mean(x, axis=None, keepdims: bool = False):
    if not is_var(x):
        return np.mean(x, axis=axis, keepdims=keepdims)
    size = x.data.size if axis is None else np.prod(
        [x.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(size))


def reshape(x, shape):
    if not is_var(x):
        return np.reshape(x, shape)
    data = x.data.reshape(shape)

    def backward(g):
        x._accumulate(g.reshape(x.data.shape))

    return _node(data, (x,), backward)


def transpose(x, axes):
    if not is_var(x):
        return np.transpose(x, axes)
    data = np.transpose(x.data, axes)
    inverse = np.argsort(axes)

    def backward(g):
        x._accumulate(np.transpose(g, inverse))

    return _node(data, (x,), backward)


def concat(parts, axis: int = 0):
    if not _any_var(*parts):
        return np.concatenate(parts, axis=axis)
    parts = [_lift(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for p, chunk in zip(parts, np.split(g, splits, axis=axis)):
            p._accumulate(chunk)

    return _node(data, tuple(parts), backward)


def take(x, key):
    if not is_var(x):
        return np.asarray(x)[key]
    data = x.data[key]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        x._accumulate(full)

    return _node(data, (x,), backward)


def softmax_last(x):
    """Softmax along the last axis; the shift constant is detached."""
    if not is_var(x):
        shifted = x - np.max(x, axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / np.sum(e, axis=-1, keepdims=True)
    shift = np.max(x.data, axis=-1, keepdims=True)
    e = exp(add(x, -shift))
    return div(e, sum_(e, axis=-1, keepdims=True))


def l2_normalize_rows(x, eps: float = 1e-12):
    """Unit-norm rows with the same zero-vector guard as numerics.l2_normalize."""
    norm = sqrt(sum_(mul(x, x), axis=-1, keepdims=True))
    return div(x, maximum(norm, eps))


def gelu(x):
    """tanh-approximate GELU."""
    c = float(np.sqrt(2.0 / np.pi))
    inner = mul(add(x, mul(power(x, 3.0), 0.044715)), c)
    return mul(mul(x, add(tanh(inner), 1.0)), 0.5)


def layer_norm(x, scale, offset, eps: float = 1e-5):
    """Row-wise layer normalization over the last axis."""
    mu = mean(x, axis=-1, keepdims=True)
    centered = add(x, mul(mu, -1.0))
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    normed = div(centered, sqrt(add(var, eps)))
    return add(mul(normed, scale), offset)
