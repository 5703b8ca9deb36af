"""Randomised small cases for every tape op with a hand-written backward.

Each generator takes an ``rng`` and returns ``(build, inputs, wrt)`` for
:func:`oracles.grad_check`.  Inputs are float64 so the central differences
are not swamped by rounding.
"""
from __future__ import annotations

import numpy as np

from ctsynth.nn import autograd as ag
from ctsynth.nn import functional as F


def _dims(rng, lo=2, hi=5):
    return tuple(int(v) for v in rng.integers(lo, hi, 3))


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap + x, x)


def conv3d(rng):
    ci, co = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    stride = int(rng.choice([1, 2]))
    k = int(rng.choice([1, 3])) if stride == 1 else 3
    x = rng.standard_normal((1, ci) + _dims(rng, 3, 6))
    w = rng.standard_normal((co, ci, k, k, k))
    b = rng.standard_normal(co)
    return (lambda x, w, b: ag.conv3d(x, w, b, (stride,) * 3)), [x, w, b], None


def conv3d_depth_pad(rng):
    """The asymmetric depth padding used by split segments."""
    ci, co = 2, int(rng.integers(1, 3))
    pad = (int(rng.integers(0, 3)), int(rng.integers(0, 3)))
    x = rng.standard_normal((1, ci, 4, 3, 3))
    w = rng.standard_normal((co, ci, 3, 3, 3))
    b = rng.standard_normal(co)

    def build(x, w, b):
        out = F.conv3d_forward(w.data, b.data, x.data, d_pad=pad)
        return ag._node(out, (x, w, b), lambda g: F.conv3d_backward(w.data, x.data, g, d_pad=pad))

    return build, [x, w, b], None


def group_norm(rng):
    groups = int(rng.choice([1, 2]))
    c = groups * int(rng.integers(1, 3))
    x = 1.5 * rng.standard_normal((int(rng.integers(1, 3)), c) + _dims(rng, 2, 4)) + rng.normal()
    gamma, beta = rng.standard_normal(c), rng.standard_normal(c)
    return (lambda x, g, b: ag.group_norm(x, g, b, groups, 1e-5)), [x, gamma, beta], None


def _activation(kind):
    def case(rng):
        x = _away_from_zero(rng, (1, 2) + _dims(rng)) * 2
        return (lambda x: ag.activation(x, kind)), [x], None
    case.__name__ = kind
    return case


def upsample(rng):
    return ag.upsample, [rng.standard_normal((1, 2) + _dims(rng, 1, 3))], None


def avg_pool2(rng):
    return ag.avg_pool2, [rng.standard_normal((1, 2) + _dims(rng, 2, 6))], None


def linear(rng):
    n, a, b = (int(v) for v in rng.integers(1, 5, 3))
    return ag.linear, [rng.standard_normal((n, a)), rng.standard_normal((b, a)), rng.standard_normal(b)], None


def embedding(rng):
    labels = rng.integers(0, 5, (1,) + _dims(rng, 1, 3))
    return (lambda t: ag.embedding(t, labels)), [rng.standard_normal((5, 3))], None


def add(rng):
    shape = (1, 2) + _dims(rng)
    return ag.add, [rng.standard_normal(shape), rng.standard_normal((1, 2, 1, 1, 1))], None


def sub(rng):
    shape = (2, 3)
    return ag.sub, [rng.standard_normal(shape), rng.standard_normal((1, 3))], None


def mul(rng):
    shape = (1, 2) + _dims(rng)
    return ag.mul, [rng.standard_normal(shape), rng.standard_normal(shape)], None


def scale(rng):
    k = float(rng.normal())
    return (lambda a: ag.scale(a, k)), [rng.standard_normal((3, 4))], None


def exp(rng):
    return ag.exp, [rng.standard_normal((2, 3, 2))], None


def square(rng):
    return ag.square, [rng.standard_normal((2, 3, 2))], None


def channel_bias(rng):
    n = int(rng.integers(1, 3))
    return ag.channel_bias, [rng.standard_normal((n, 3) + _dims(rng)), rng.standard_normal((n, 3))], None


def channel_affine(rng):
    n = int(rng.integers(1, 3))
    return (ag.channel_affine,
            [rng.standard_normal((n, 2) + _dims(rng)), rng.standard_normal((n, 2)), rng.standard_normal((n, 2))],
            None)


def split_channels(rng):
    sizes = [int(v) for v in rng.integers(1, 4, 2)]

    def build(v):
        a, b = ag.split_channels(v, sizes)
        return ag.concat([ag.square(b), ag.scale(a, 3.0)])

    return build, [rng.standard_normal((2, sum(sizes)))], None


def concat(rng):
    axis = int(rng.choice([1, 2]))
    a = rng.standard_normal((1, 2, 3, 2, 2))
    b = rng.standard_normal((1, 2, 3, 2, 2))
    return (lambda a, b: ag.concat([a, b], axis)), [a, b], None


def mean(rng):
    return ag.mean, [rng.standard_normal((1, 2) + _dims(rng))], None


def l1(rng):
    a = rng.standard_normal((1, 2) + _dims(rng))
    b = a + _away_from_zero(rng, a.shape)
    return ag.l1, [a, b], None


def log_clamped(rng):
    p = rng.uniform(0.05, 0.95, (2, 3, 3))
    return ag.log_clamped, [p], None


GRAD_CASES = {
    "conv3d": conv3d,
    "conv3d_depth_pad": conv3d_depth_pad,
    "group_norm": group_norm,
    "silu": _activation("silu"),
    "relu": _activation("relu"),
    "leaky_relu": _activation("leaky_relu"),
    "sigmoid": _activation("sigmoid"),
    "upsample": upsample,
    "avg_pool2": avg_pool2,
    "linear": linear,
    "embedding": embedding,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "exp": exp,
    "square": square,
    "channel_bias": channel_bias,
    "channel_affine": channel_affine,
    "split_channels": split_channels,
    "concat": concat,
    "mean": mean,
    "l1": l1,
    "log_clamped": log_clamped,
}
