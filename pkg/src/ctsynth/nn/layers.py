"""Parameter-holding layers and the sequential ``LayerChain``.

Each layer has two entry points: ``forward(array)`` is a pure array function
(used by the split executor and inference), and ``__call__(Var)`` records the
op on the autograd tape for training.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import autograd as ag
from . import functional as F
from .autograd import Var


def parameter(array, name=None) -> Var:
    return Var(np.ascontiguousarray(array, dtype=np.float32), requires_grad=True, name=name)


def _triple(v):
    return (v, v, v) if isinstance(v, int) else tuple(v)


class Layer:
    kind = "layer"

    def params(self) -> dict:
        return {}

    def out_channels(self, c_in: int) -> int:
        return c_in

    def output_shape(self, shape):
        return tuple(shape)


class Conv3d(Layer):
    kind = "conv3d"

    def __init__(self, weight, bias, stride=1):
        self.weight = weight if isinstance(weight, Var) else parameter(weight)
        self.bias = bias if isinstance(bias, Var) else parameter(bias)
        self.stride = _triple(stride)
        ks = self.weight.data.shape[2:]
        if any(s not in (1, 2) for s in self.stride):
            raise ValueError(f"stride must be 1 or 2 per axis, got {self.stride}")
        for k, s in zip(ks, self.stride):
            if s == 1 and k % 2 == 0:
                raise ValueError(f"stride-1 convolution needs odd kernels, got {ks}")
        if not np.all(np.isfinite(self.weight.data)):
            raise ValueError("non-finite convolution weights")

    @classmethod
    def init(cls, c_in, c_out, k=3, stride=1, rng=None, zero=False):
        if zero:
            w = np.zeros((c_out, c_in, k, k, k), np.float32)
            return cls(w, np.zeros(c_out, np.float32), stride)
        rng = np.random.default_rng() if rng is None else rng
        fan_in = c_in * k ** 3
        w = rng.normal(0.0, np.sqrt(1.0 / fan_in), (c_out, c_in, k, k, k))
        return cls(w, np.zeros(c_out), stride)

    @property
    def kernel(self):
        return self.weight.data.shape[2:]

    @property
    def padding(self):
        return tuple(k // 2 for k in self.kernel)

    @property
    def c_in(self):
        return self.weight.data.shape[1]

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def out_channels(self, c_in):
        if c_in != self.c_in:
            raise ValueError(f"conv expects {self.c_in} channels, got {c_in}")
        return self.weight.data.shape[0]

    def output_shape(self, shape):
        n, c, *sp = shape
        co = self.out_channels(c)
        out = [F.conv_output_extent(e, k, s, p, p)
               for e, k, s, p in zip(sp, self.kernel, self.stride, self.padding)]
        if min(out) < 1:
            raise ValueError(f"convolution output extent would be < 1 for input {shape}")
        return (n, co, *out)

    def forward(self, x, d_pad=None):
        return F.conv3d_forward(self.weight.data, self.bias.data, x, self.stride, self.padding, d_pad)

    def __call__(self, x):
        return ag.conv3d(x, self.weight, self.bias, self.stride, self.padding)

    def __repr__(self):
        co, ci, k = self.weight.data.shape[0], self.c_in, self.kernel[0]
        return f"Conv3d({ci}->{co}, k={k}, s={self.stride[0]})"


class GroupNorm(Layer):
    kind = "groupnorm"

    def __init__(self, groups, gamma, beta, eps=1e-5):
        self.gamma = gamma if isinstance(gamma, Var) else parameter(gamma)
        self.beta = beta if isinstance(beta, Var) else parameter(beta)
        self.groups = int(groups)
        self.eps = float(eps)
        c = self.gamma.data.shape[0]
        if c % self.groups:
            raise ValueError(f"{c} channels not divisible into {self.groups} groups")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @classmethod
    def init(cls, channels, groups, eps=1e-5):
        return cls(groups, np.ones(channels), np.zeros(channels), eps)

    @property
    def channels(self):
        return self.gamma.data.shape[0]

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def out_channels(self, c_in):
        if c_in != self.channels:
            raise ValueError(f"group norm expects {self.channels} channels, got {c_in}")
        return c_in

    def output_shape(self, shape):
        self.out_channels(shape[1])
        return tuple(shape)

    def partial(self, x):
        return F.groupnorm_partial(x, self.groups)

    def apply(self, x, stats):
        mean, var = stats
        return F.groupnorm_apply(self.gamma.data, self.beta.data, x, mean, var, self.eps)

    def forward(self, x):
        return self.apply(x, F.groupnorm_stats(self.groups, x))

    def __call__(self, x):
        return ag.group_norm(x, self.gamma, self.beta, self.groups, self.eps)

    def __repr__(self):
        return f"GroupNorm({self.channels}, groups={self.groups})"


class Activation(Layer):
    kind = "activation"

    def __init__(self, fn="silu"):
        if fn not in ("silu", "relu", "leaky_relu"):
            raise ValueError(f"unsupported activation {fn!r}")
        self.fn = fn

    def forward(self, x):
        return F.activation_forward(self.fn, x)

    def __call__(self, x):
        return ag.activation(x, self.fn)

    def __repr__(self):
        return f"Activation({self.fn})"


class Upsample(Layer):
    """Nearest-neighbour x2 on d, h and w."""

    kind = "upsample"

    def output_shape(self, shape):
        n, c, d, h, w = shape
        return (n, c, 2 * d, 2 * h, 2 * w)

    def forward(self, x):
        return F.upsample_nearest_forward(x)

    def __call__(self, x):
        return ag.upsample(x)

    def __repr__(self):
        return "Upsample(x2)"


class Identity(Layer):
    kind = "identity"

    def forward(self, x):
        return x

    def __call__(self, x):
        return x

    def __repr__(self):
        return "Identity()"


class Linear(Layer):
    kind = "linear"

    def __init__(self, weight, bias):
        self.weight = weight if isinstance(weight, Var) else parameter(weight)
        self.bias = bias if isinstance(bias, Var) else parameter(bias)

    @classmethod
    def init(cls, n_in, n_out, rng=None, zero=False):
        if zero:
            return cls(np.zeros((n_out, n_in)), np.zeros(n_out))
        rng = np.random.default_rng() if rng is None else rng
        return cls(rng.normal(0.0, np.sqrt(1.0 / n_in), (n_out, n_in)), np.zeros(n_out))

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        return F.linear_forward(self.weight.data, self.bias.data, x)

    def __call__(self, x):
        return ag.linear(x, self.weight, self.bias)


@dataclass
class LayerChain:
    """Strictly sequential stack of layers (no skips)."""

    layers: list = field(default_factory=list)

    def __post_init__(self):
        self.layers = list(self.layers)

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    def validate(self, c_in: int) -> int:
        """Check channel compatibility; returns the output channel count."""
        c = c_in
        for layer in self.layers:
            c = layer.out_channels(c)
        return c

    def shapes(self, input_shape):
        """Activation shapes: input followed by each layer's output."""
        shapes = [tuple(input_shape)]
        for layer in self.layers:
            shapes.append(layer.output_shape(shapes[-1]))
        return shapes

    def d_scale(self) -> Fraction:
        """Nominal output/input ratio along the depth axis."""
        r = Fraction(1)
        for layer in self.layers:
            if layer.kind == "conv3d":
                r /= layer.stride[0]
            elif layer.kind == "upsample":
                r *= 2
        return r

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def named_params(self, prefix=""):
        out = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.params().items():
                out[f"{prefix}{i}.{name}"] = p
        return out

    def __repr__(self):
        return "LayerChain([" + ", ".join(map(repr, self.layers)) + "])"
