"""Small tape-based reverse-mode autodiff over numpy arrays.

Only the operations the two-stream model needs are provided. Each op returns
a :class:`Var` whose ``_backward`` closure pushes gradients to its parents.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .diffcheck import note_branch


class Var:
    __array_priority__ = 100.0

    def __init__(self, value, parents=(), backward=None, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.shape})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.value)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node._parents if id(p) not in seen)
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __neg__ = lambda self: mul(self, -1.0)
    __matmul__ = lambda self, o: matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)


def param(value, name=None) -> Var:
    return Var(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _node(value, parents, backward):
    return Var(value, parents, backward)


def add(a, b):
    a, b = as_var(a), as_var(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.value + b.value, (a, b), bw)


def sub(a, b):
    a, b = as_var(a), as_var(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _node(a.value - b.value, (a, b), bw)


def mul(a, b):
    a, b = as_var(a), as_var(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.shape))

    return _node(a.value * b.value, (a, b), bw)


def div(a, b):
    a, b = as_var(a), as_var(b)
    out = a.value / b.value

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.value, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.value, b.shape))

    return _node(out, (a, b), bw)


def matmul(a, b):
    a, b = as_var(a), as_var(b)

    def bw(g):
        if a.requires_grad:
            ga = np.outer(g, b.value) if b.ndim == 1 and a.ndim == 2 else g @ np.swapaxes(b.value, -1, -2)
            a._accumulate(ga)
        if b.requires_grad:
            gb = a.value.T @ g if a.ndim == 2 else np.outer(a.value, g)
            b._accumulate(gb)

    return _node(a.value @ b.value, (a, b), bw)


def exp(x):
    x = as_var(x)
    out = np.exp(x.value)
    return _node(out, (x,), lambda g: x._accumulate(g * out))


def log(x):
    x = as_var(x)
    return _node(np.log(x.value), (x,), lambda g: x._accumulate(g / x.value))


def maximum(x, floor: float):
    """Clamp from below; gradient passes only where the value is kept."""
    x = as_var(x)
    keep = x.value >= floor
    note_branch(keep)
    return _node(np.where(keep, x.value, floor), (x,), lambda g: x._accumulate(g * keep))


def sigmoid(x):
    x = as_var(x)
    s = T.sigmoid(x.value)
    return _node(s, (x,), lambda g: x._accumulate(g * s * (1.0 - s)))


def tanh(x):
    x = as_var(x)
    t = np.tanh(x.value)
    return _node(t, (x,), lambda g: x._accumulate(g * (1.0 - t * t)))


def relu(x):
    x = as_var(x)
    mask = x.value > 0
    note_branch(mask)
    return _node(x.value * mask, (x,), lambda g: x._accumulate(g * mask))


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    x = as_var(x)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _node(np.sum(x.value, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x, axis=None, keepdims=False):
    x = as_var(x)
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape):
    x = as_var(x)
    return _node(x.value.reshape(shape), (x,), lambda g: x._accumulate(g.reshape(x.shape)))


def transpose(x, axes):
    x = as_var(x)
    inv = np.argsort(axes)
    return _node(x.value.transpose(axes), (x,), lambda g: x._accumulate(g.transpose(inv)))


def getitem(x, idx):
    x = as_var(x)

    items = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)

    def bw(g):
        full = np.zeros(x.shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        x._accumulate(full)

    return _node(x.value[idx], (x,), bw)


def concat(xs, axis=0):
    xs = [as_var(v) for v in xs]
    sizes = np.cumsum([v.shape[axis] for v in xs])[:-1]

    def bw(g):
        for v, part in zip(xs, np.split(g, sizes, axis=axis)):
            if v.requires_grad:
                v._accumulate(part)

    return _node(np.concatenate([v.value for v in xs], axis=axis), tuple(xs), bw)


def stack(xs, axis=0):
    xs = [as_var(v) for v in xs]

    def bw(g):
        for i, v in enumerate(xs):
            if v.requires_grad:
                v._accumulate(np.take(g, i, axis=axis))

    return _node(np.stack([v.value for v in xs], axis=axis), tuple(xs), bw)


def softmax(x, axis=-1):
    x = as_var(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accumulate(s * (g - np.sum(g * s, axis=axis, keepdims=True)))

    return _node(s, (x,), bw)


def conv2d(x, w, b=None, pad="same"):
    x, w = as_var(x), as_var(w)
    b = None if b is None else as_var(b)
    out = T.conv2d(x.value, w.value, None if b is None else b.value, pad)

    def bw(g):
        gx, gw, gb = T.conv2d_grads(x.value, w.value, g, pad)
        if x.requires_grad:
            x._accumulate(gx)
        if w.requires_grad:
            w._accumulate(gw)
        if b is not None and b.requires_grad:
            b._accumulate(gb)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, bw)


def avg_pool2(x):
    """2x2 mean pooling with stride 2 over the last two axes (extents must be even)."""
    x = as_var(x)
    H, W = x.shape[-2:]
    if H % 2 or W % 2:
        raise ValueError(f"avg_pool2 needs even spatial extents, got {H}x{W}")
    v = x.value.reshape(x.shape[:-2] + (H // 2, 2, W // 2, 2)).mean(axis=(-3, -1))

    def bw(g):
        up = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25
        x._accumulate(up)

    return _node(v, (x,), bw)
