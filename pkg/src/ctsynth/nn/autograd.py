"""A minimal reverse-mode tape over the functional kernels.

``Var`` wraps an array; each op records its parents and a closure mapping the
output gradient to parent gradients.  Parameters are leaf ``Var`` objects with
``requires_grad=True``; frozen parameters simply have it switched off and
never receive a gradient.
"""
from __future__ import annotations

import numpy as np

from . import functional as F


class Var:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Var{label}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
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
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def as_var(x) -> Var:
    if isinstance(x, Var):
        return x
    if isinstance(x, (int, float)):
        return Var(np.float32(x))
    return Var(np.asarray(x))


def _node(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    return Var(data, requires_grad=req, _parents=tuple(parents) if req else (),
               _backward=backward if req else None)


# -- layer ops ----------------------------------------------------------------

def conv3d(x, weight, bias, stride=(1, 1, 1), padding=None):
    x, weight, bias = as_var(x), as_var(weight), as_var(bias)
    out = F.conv3d_forward(weight.data, bias.data, x.data, stride, padding)

    def back(g):
        gx, gw, gb = F.conv3d_backward(weight.data, x.data, g, stride, padding)
        return gx, gw, gb

    return _node(out, (x, weight, bias), back)


def group_norm(x, gamma, beta, groups, eps):
    x, gamma, beta = as_var(x), as_var(gamma), as_var(beta)
    out = F.groupnorm_forward(gamma.data, beta.data, x.data, groups, eps)

    def back(g):
        return F.groupnorm_backward(gamma.data, x.data, g, groups, eps)

    return _node(out, (x, gamma, beta), back)


def activation(x, kind):
    x = as_var(x)
    out = F.activation_forward(kind, x.data)
    return _node(out, (x,), lambda g: (F.activation_backward(kind, x.data, g),))


def upsample(x):
    x = as_var(x)
    return _node(F.upsample_nearest_forward(x.data), (x,),
                 lambda g: (F.upsample_nearest_backward(g),))


def avg_pool2(x):
    x = as_var(x)
    shape = x.data.shape
    return _node(F.avg_pool2_forward(x.data), (x,), lambda g: (F.avg_pool2_backward(shape, g),))


def linear(x, weight, bias):
    x, weight, bias = as_var(x), as_var(weight), as_var(bias)
    out = F.linear_forward(weight.data, bias.data, x.data)
    return _node(out, (x, weight, bias), lambda g: F.linear_backward(weight.data, x.data, g))


def embedding(table, labels):
    """Row lookup ``table[labels]`` moved to channel-first ``[n, width, d, h, w]``."""
    table = as_var(table)
    labels = np.asarray(labels)
    out = np.moveaxis(table.data[labels], -1, 1)

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, labels.ravel(), np.moveaxis(g, 1, -1).reshape(-1, table.data.shape[1]))
        return (gt,)

    return _node(np.ascontiguousarray(out), (table,), back)


# -- arithmetic -----------------------------------------------------------------

def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b):
    a, b = as_var(a), as_var(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b):
    a, b = as_var(a), as_var(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)))


def mul(a, b):
    a, b = as_var(a), as_var(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.data.shape),
                            _unbroadcast(g * a.data, b.data.shape)))


def scale(a, k: float):
    a = as_var(a)
    return _node(a.data * k, (a,), lambda g: (g * k,))


def exp(a):
    a = as_var(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def square(a):
    a = as_var(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def channel_bias(x, vec):
    """Add a per-sample channel vector ``[n, c]`` to every voxel of ``x``."""
    x, vec = as_var(x), as_var(vec)
    out = x.data + vec.data[:, :, None, None, None]
    return _node(out, (x, vec), lambda g: (g, g.sum(axis=(2, 3, 4))))


def channel_affine(x, scale, shift):
    """``x * (1 + scale) + shift`` with per-sample channel vectors ``[n, c]``."""
    x, scale, shift = as_var(x), as_var(scale), as_var(shift)
    a = (1.0 + scale.data)[:, :, None, None, None]
    out = x.data * a + shift.data[:, :, None, None, None]
    return _node(out, (x, scale, shift),
                 lambda g: (g * a, (g * x.data).sum(axis=(2, 3, 4)), g.sum(axis=(2, 3, 4))))


def split_channels(v, sizes):
    """Split ``[n, sum(sizes)]`` into column blocks."""
    v = as_var(v)
    bounds = np.cumsum([0] + list(sizes))
    return [_take_cols(v, bounds[i], bounds[i + 1]) for i in range(len(sizes))]


def _take_cols(v, a, b):
    def back(g):
        out = np.zeros_like(v.data)
        out[:, a:b] = g
        return (out,)

    return _node(np.ascontiguousarray(v.data[:, a:b]), (v,), back)


def concat(parts, axis=1):
    parts = [as_var(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([0] + [p.data.shape[axis] for p in parts])

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(parts)))

    return _node(out, tuple(parts), back)


def mean(a):
    a = as_var(a)
    n = a.data.size
    out = np.asarray(a.data.mean(dtype=np.float64), dtype=a.data.dtype)
    return _node(out, (a,), lambda g: (np.full(a.data.shape, g / n, dtype=a.data.dtype),))


def l1(a, b):
    """Mean absolute difference."""
    a, b = as_var(a), as_var(b)
    diff = a.data - b.data
    n = diff.size
    out = np.asarray(np.abs(diff).mean(dtype=np.float64), dtype=diff.dtype)

    def back(g):
        d = (g / n) * np.sign(diff)
        return d, -d

    return _node(out, (a, b), back)


def log_clamped(p, lo=1e-7, hi=1.0 - 1e-7):
    """``log(clip(p, lo, hi))``; the clamp passes no gradient outside the range."""
    p = as_var(p)
    pc = np.clip(p.data, lo, hi)
    inside = (p.data >= lo) & (p.data <= hi)
    return _node(np.log(pc), (p,), lambda g: (g * inside / pc,))
