"""Named layer chains for benchmarking the split executor, and a random chain
generator used by the equivalence suite."""
from __future__ import annotations

import numpy as np

from .nn.layers import Activation, Conv3d, GroupNorm, LayerChain, Upsample


def _conv_stack(widths, rng, act="silu"):
    layers = []
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        layers.append(Conv3d.init(a, b, 3, 1, rng))
        if i < len(widths) - 2:
            layers.append(Activation(act))
    return layers


def _decoder(rng):
    return [
        Conv3d.init(4, 8, 3, 1, rng), GroupNorm.init(8, 4), Activation("silu"),
        Upsample(), Conv3d.init(8, 8, 3, 1, rng), GroupNorm.init(8, 4), Activation("silu"),
        Conv3d.init(8, 1, 3, 1, rng),
    ]


# name -> (builder, default input shape)
PRESETS = {
    "conv3": (lambda rng: _conv_stack([1, 8, 8, 1], rng), (1, 1, 32, 16, 16)),
    "conv4": (lambda rng: _conv_stack([4, 16, 16, 16, 4], rng), (1, 4, 64, 32, 32)),
    "decoder": (_decoder, (1, 4, 16, 8, 8)),
}


def make_preset(name: str, seed: int = 0):
    """Returns ``(chain, default_input_shape)`` with seeded weights."""
    try:
        builder, shape = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown chain preset {name!r}; choose from {sorted(PRESETS)}") from None
    return LayerChain(builder(np.random.default_rng(seed))), shape


def random_chain(rng, c_in=2, max_depth=8, d_extent=32, hw_extent=6, with_norm=None):
    """Random sequential chain mixing conv / norm / activation / upsample.

    Extents are tracked so every layer stays valid on an input of depth
    ``d_extent`` and height/width ``hw_extent``; at most two upsamples and two
    stride-2 convolutions are used.  ``with_norm=True`` forces at least one
    group norm.
    """
    depth = int(rng.integers(2, max_depth + 1))
    layers, c = [], c_in
    d, hw = d_extent, hw_extent
    ups = downs = 0
    for _ in range(depth):
        choice = rng.choice(["conv", "conv", "norm", "act", "up"])
        if choice == "up" and ups < 2 and d * 2 <= 4 * d_extent:
            layers.append(Upsample())
            d, hw, ups = 2 * d, 2 * hw, ups + 1
        elif choice == "norm":
            layers.append(_random_norm(rng, c))
        elif choice == "act":
            layers.append(Activation(str(rng.choice(["silu", "relu", "leaky_relu"]))))
        else:
            stride = 2 if (downs < 2 and d >= 16 and hw >= 4 and rng.random() < 0.3) else 1
            k = int(rng.choice([1, 3])) if stride == 2 else int(rng.choice([1, 3, 3, 5]))
            co = int(rng.choice([2, 4, 6]))
            conv = Conv3d.init(c, co, k, stride, rng)
            conv.bias.data[:] = rng.normal(0, 0.1, co)
            layers.append(conv)
            if stride == 2:
                p = k // 2
                d = (d + 2 * p - k) // 2 + 1
                hw = (hw + 2 * p - k) // 2 + 1
                downs += 1
            c = co
    if with_norm and not any(layer.kind == "groupnorm" for layer in layers):
        pos = int(rng.integers(0, len(layers) + 1))
        c_at = c_in
        for layer in layers[:pos]:
            c_at = layer.out_channels(c_at)
        layers.insert(pos, _random_norm(rng, c_at))
    return LayerChain(layers)


def _random_norm(rng, c):
    groups = int(rng.choice([g for g in (1, 2) if c % g == 0]))
    gn = GroupNorm.init(c, groups)
    gn.gamma.data[:] = rng.uniform(0.5, 1.5, c)
    gn.beta.data[:] = rng.normal(0, 0.2, c)
    return gn
