"""Pure forward/backward kernels for the 3-D layer zoo.

Every function works on ``numpy`` arrays in ``[n, c, d, h, w]`` layout and
computes in the dtype of its inputs (float32 in the pipeline; the gradient
checks feed float64).  Nothing here keeps state, so calls on distinct
tensors are safe from several threads.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LEAKY_SLOPE = 0.2


# -- convolution -------------------------------------------------------------

def conv_output_extent(extent: int, k: int, s: int, pad_lo: int, pad_hi: int) -> int:
    return (extent + pad_lo + pad_hi - k) // s + 1


def _conv_geometry(x_shape, w_shape, stride, padding, d_pad):
    n, ci, D, H, W = x_shape
    co, wci, kd, kh, kw = w_shape
    if wci != ci:
        raise ValueError(f"channel mismatch: input has {ci}, weight expects {wci}")
    sd, sh, sw = stride
    pd, ph, pw = padding
    pd_lo, pd_hi = (pd, pd) if d_pad is None else d_pad
    Do = conv_output_extent(D, kd, sd, pd_lo, pd_hi)
    Ho = conv_output_extent(H, kh, sh, ph, ph)
    Wo = conv_output_extent(W, kw, sw, pw, pw)
    if min(Do, Ho, Wo) < 1:
        raise ValueError(f"convolution output extent would be < 1 for input {x_shape}")
    return (Do, Ho, Wo), (pd_lo, pd_hi)


def _depth_chunk(x_nbytes, out_nbytes, slice_cols_nbytes):
    # im2col workspace is capped at a quarter of the live in+out activations
    return max(1, ((x_nbytes + out_nbytes) // 4) // max(1, slice_cols_nbytes))


def _chunk_cols(x, o0, o1, kernel, stride, pads):
    """im2col stack for output depth rows ``[o0, o1)``, shaped ``[od, n*Ho*Wo, K]``.

    One matrix per output depth row: a row's product then has the same shape
    whatever slab it came from, so split and whole-volume runs agree bitwise.
    Returns ``(cols, lo, hi, pad_lo)`` where ``[lo, hi)`` is the unpadded input
    depth range read and ``pad_lo`` the zero rows prepended to it.
    """
    kd, kh, kw = kernel
    sd, sh, sw = stride
    (pd_lo, _), ph, pw = pads
    D = x.shape[2]
    lo = o0 * sd - pd_lo
    hi = (o1 - 1) * sd + kd - pd_lo
    slab = x[:, :, max(lo, 0):min(hi, D)]
    before, after = max(0, -lo), max(0, hi - D)
    slab = np.pad(slab, ((0, 0), (0, 0), (before, after), (ph, ph), (pw, pw)))
    win = sliding_window_view(slab, (kd, kh, kw), axis=(2, 3, 4))[:, :, ::sd, ::sh, ::sw]
    n, ci, od, Ho, Wo = win.shape[:5]
    cols = win.transpose(2, 0, 3, 4, 1, 5, 6, 7).reshape(od, n * Ho * Wo, ci * kd * kh * kw)
    return cols, lo, hi, before


def conv3d_forward(weight, bias, x, stride=(1, 1, 1), padding=None, d_pad=None):
    """Direct 3-D convolution with zero padding.

    ``padding`` defaults to ``k // 2`` per axis.  ``d_pad`` overrides the depth
    padding with an asymmetric ``(lo, hi)`` pair, which is how a segment of a
    split volume pads only at the true volume boundary.
    """
    co, ci, kd, kh, kw = weight.shape
    if padding is None:
        padding = (kd // 2, kh // 2, kw // 2)
    (Do, Ho, Wo), dp = _conv_geometry(x.shape, weight.shape, stride, padding, d_pad)
    n = x.shape[0]
    dtype = np.result_type(x, weight)
    out = np.empty((n, co, Do, Ho, Wo), dtype=dtype)
    wmat = weight.reshape(co, -1).T.astype(dtype, copy=False)
    per_slice = n * Ho * Wo * ci * kd * kh * kw * out.itemsize
    chunk = _depth_chunk(x.nbytes, out.nbytes, per_slice)
    pads = (dp, padding[1], padding[2])
    for o0 in range(0, Do, chunk):
        o1 = min(Do, o0 + chunk)
        cols, *_ = _chunk_cols(x, o0, o1, (kd, kh, kw), stride, pads)
        res = np.matmul(cols, wmat)
        out[:, :, o0:o1] = res.reshape(o1 - o0, n, Ho, Wo, co).transpose(1, 4, 0, 2, 3)
        del cols, res
    out += bias.astype(dtype, copy=False)[None, :, None, None, None]
    return out


def conv3d_backward(weight, x, grad_out, stride=(1, 1, 1), padding=None, d_pad=None):
    """Gradients of ``sum(grad_out * conv3d_forward(...))``.

    Returns ``(grad_x, grad_weight, grad_bias)``.
    """
    co, ci, kd, kh, kw = weight.shape
    if padding is None:
        padding = (kd // 2, kh // 2, kw // 2)
    (Do, Ho, Wo), dp = _conv_geometry(x.shape, weight.shape, stride, padding, d_pad)
    n, _, D, H, W = x.shape
    if grad_out.shape != (n, co, Do, Ho, Wo):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match {(n, co, Do, Ho, Wo)}")
    dtype = np.result_type(x, weight, grad_out)
    sd, sh, sw = stride
    _, ph, pw = padding
    wmat = weight.reshape(co, -1).astype(dtype, copy=False)
    grad_x = np.zeros(x.shape, dtype=dtype)
    grad_w = np.zeros((co, ci * kd * kh * kw), dtype=dtype)
    grad_b = grad_out.sum(axis=(0, 2, 3, 4)).astype(dtype)
    per_slice = n * Ho * Wo * ci * kd * kh * kw * np.dtype(dtype).itemsize
    chunk = _depth_chunk(x.nbytes, grad_out.nbytes, per_slice)
    pads = (dp, ph, pw)
    for o0 in range(0, Do, chunk):
        o1 = min(Do, o0 + chunk)
        od = o1 - o0
        cols, lo, hi, before = _chunk_cols(x, o0, o1, (kd, kh, kw), stride, pads)
        g = grad_out[:, :, o0:o1].transpose(2, 0, 3, 4, 1).reshape(-1, co)
        grad_w += g.T @ cols.reshape(g.shape[0], -1)
        del cols
        dcols = (g @ wmat).reshape(od, n, Ho, Wo, ci, kd, kh, kw)
        gslab = np.zeros((n, ci, hi - lo, H + 2 * ph, W + 2 * pw), dtype=dtype)
        for a in range(kd):
            for b in range(kh):
                for c in range(kw):
                    gslab[:, :, a:a + od * sd:sd, b:b + Ho * sh:sh, c:c + Wo * sw:sw] += (
                        dcols[..., a, b, c].transpose(1, 4, 0, 2, 3)
                    )
        real_lo, real_hi = max(lo, 0), min(hi, D)
        grad_x[:, :, real_lo:real_hi] += gslab[
            :, :, before:before + real_hi - real_lo, ph:ph + H, pw:pw + W
        ]
    return grad_x, grad_w.reshape(weight.shape), grad_b


# -- group normalisation -----------------------------------------------------

def _grouped(x, groups):
    n, c = x.shape[:2]
    if c % groups:
        raise ValueError(f"{c} channels cannot be split into {groups} groups")
    return x.reshape(n, groups, -1)


def groupnorm_partial(x, groups):
    """Per-(batch, group) partial sums ``(sum, sum_sq, count)`` in float64.

    Partials from disjoint pieces of a tensor add up to the partials of the
    whole, which is what lets split execution recover global statistics.
    """
    g = _grouped(x, groups).astype(np.float64)
    return g.sum(axis=2), np.square(g).sum(axis=2), g.shape[2]


def combine_partials(partials):
    """Reduce partials in the order given (fixed order keeps results reproducible)."""
    s = ss = None
    count = 0
    for ps, pss, pc in partials:
        s = ps.copy() if s is None else s + ps
        ss = pss.copy() if ss is None else ss + pss
        count += pc
    return s, ss, count


def groupnorm_stats(groups, x=None, partial=None):
    """Mean and (biased) variance per ``(batch, group)``."""
    s, ss, count = groupnorm_partial(x, groups) if partial is None else partial
    mean = s / count
    var = np.maximum(ss / count - mean * mean, 0.0)
    return mean, var


def groupnorm_apply(gamma, beta, x, mean, var, eps):
    n, c = x.shape[:2]
    groups = mean.shape[1]
    dtype = x.dtype
    rstd = (1.0 / np.sqrt(var + eps)).astype(dtype)
    xg = _grouped(x, groups)
    xhat = (xg - mean.astype(dtype)[:, :, None]) * rstd[:, :, None]
    xhat = xhat.reshape(x.shape)
    shape = (1, c) + (1,) * (x.ndim - 2)
    return xhat * gamma.astype(dtype).reshape(shape) + beta.astype(dtype).reshape(shape)


def groupnorm_forward(gamma, beta, x, groups, eps):
    mean, var = groupnorm_stats(groups, x)
    return groupnorm_apply(gamma, beta, x, mean, var, eps)


def groupnorm_backward(gamma, x, grad_out, groups, eps):
    """Returns ``(grad_x, grad_gamma, grad_beta)`` for a whole-tensor group norm."""
    n, c = x.shape[:2]
    dtype = np.result_type(x, gamma, grad_out)
    mean, var = groupnorm_stats(groups, x)
    rstd = 1.0 / np.sqrt(var + eps)
    xg = _grouped(x, groups).astype(np.float64)
    xhat = (xg - mean[:, :, None]) * rstd[:, :, None]
    shape = (1, c) + (1,) * (x.ndim - 2)
    reduce_axes = (0,) + tuple(range(2, x.ndim))
    xhat_full = xhat.reshape(x.shape)
    grad_gamma = (grad_out * xhat_full).sum(axis=reduce_axes)
    grad_beta = grad_out.sum(axis=reduce_axes)
    dxhat = (grad_out * gamma.reshape(shape)).reshape(n, groups, -1).astype(np.float64)
    grad_x = rstd[:, :, None] * (
        dxhat - dxhat.mean(axis=2, keepdims=True) - xhat * (dxhat * xhat).mean(axis=2, keepdims=True)
    )
    return (
        grad_x.reshape(x.shape).astype(dtype),
        grad_gamma.astype(dtype),
        grad_beta.astype(dtype),
    )


# -- activations -------------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def activation_forward(kind, x):
    if kind == "silu":
        return x * _sigmoid(x)
    if kind == "relu":
        return np.maximum(x, 0).astype(x.dtype, copy=False)
    if kind == "leaky_relu":
        return np.where(x > 0, x, LEAKY_SLOPE * x).astype(x.dtype, copy=False)
    if kind == "sigmoid":
        return _sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(kind, x, grad_out):
    if x.shape != grad_out.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {grad_out.shape}")
    if kind == "silu":
        s = _sigmoid(x)
        return grad_out * s * (1 + x * (1 - s))
    if kind == "relu":
        return grad_out * (x > 0)
    if kind == "leaky_relu":
        return grad_out * np.where(x > 0, 1.0, LEAKY_SLOPE).astype(x.dtype)
    if kind == "sigmoid":
        s = _sigmoid(x)
        return grad_out * s * (1 - s)
    raise ValueError(f"unknown activation {kind!r}")


# -- resampling --------------------------------------------------------------

def upsample_nearest_forward(x):
    return x.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)


def upsample_nearest_backward(grad_out):
    n, c, D, H, W = grad_out.shape
    if D % 2 or H % 2 or W % 2:
        raise ValueError(f"grad_out shape {grad_out.shape} is not an upsampled shape")
    return grad_out.reshape(n, c, D // 2, 2, H // 2, 2, W // 2, 2).sum(axis=(3, 5, 7))


def avg_pool2_forward(x):
    """2x2x2 mean pooling; trailing odd rows are dropped."""
    n, c, D, H, W = x.shape
    xc = x[:, :, : D - D % 2, : H - H % 2, : W - W % 2]
    return xc.reshape(n, c, D // 2, 2, H // 2, 2, W // 2, 2).mean(axis=(3, 5, 7))


def avg_pool2_backward(x_shape, grad_out):
    n, c, D, H, W = x_shape
    g = upsample_nearest_forward(grad_out) / 8.0
    grad_x = np.zeros(x_shape, dtype=grad_out.dtype)
    grad_x[:, :, : g.shape[2], : g.shape[3], : g.shape[4]] = g
    return grad_x


# -- dense -------------------------------------------------------------------

def linear_forward(weight, bias, x):
    """Affine map ``x @ weight.T + bias`` on ``[n, in]`` rows."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear expects {weight.shape[1]} features, got {x.shape[-1]}")
    return x @ weight.T + bias


def linear_backward(weight, x, grad_out):
    if grad_out.shape[-1] != weight.shape[0]:
        raise ValueError("grad_out does not match linear output width")
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal step embedding ``[sin(t*w_i), cos(t*w_i)]``, ``w_i = 10000**(-2i/dim)``."""
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    omega = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    arg = float(t) * omega
    return np.concatenate([np.sin(arg), np.cos(arg)]).astype(np.float32)
