"""Dense 5-D float tensors ``[n, c, d, h, w]`` and the slab primitives used to
split and stitch them along one spatial axis.

Tensors are plain ``numpy.ndarray`` objects; :func:`tensor5` is the validating
constructor for anything coming from outside the package.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

AXES = {"d": 2, "h": 3, "w": 4}


@dataclass(frozen=True, order=True)
class Interval:
    """Half-open index range ``[start, end)`` along one spatial axis."""

    start: int
    end: int

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise ValueError(f"invalid interval [{self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start

    def __repr__(self) -> str:
        return f"[{self.start},{self.end})"

    def contains(self, other: "Interval") -> bool:
        return self.start <= other.start and other.end <= self.end

    def shift(self, offset: int) -> "Interval":
        return Interval(self.start + offset, self.end + offset)


def tensor5(data, dims=None) -> np.ndarray:
    """Build a float32 ``[n, c, d, h, w]`` array, rejecting NaN/Inf.

    ``data`` may be any array-like; when ``dims`` is given it is treated as a
    flat row-major buffer and reshaped.
    """
    arr = np.asarray(data, dtype=np.float32)
    if dims is not None:
        dims = tuple(int(v) for v in dims)
        if len(dims) != 5 or min(dims) < 1:
            raise ValueError(f"dims must be five positive counts, got {dims}")
        if arr.size != int(np.prod(dims)):
            raise ValueError(f"data length {arr.size} does not match dims {dims}")
        arr = arr.reshape(dims)
    if arr.ndim != 5 or min(arr.shape) < 1:
        raise ValueError(f"expected a 5-D tensor with positive dims, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return np.ascontiguousarray(arr)


def _axis(axis) -> int:
    try:
        return AXES[axis]
    except KeyError:
        raise ValueError(f"axis must be one of d, h, w; got {axis!r}") from None


def _check_range(t: np.ndarray, ax: int, iv: Interval):
    if iv.end > t.shape[ax]:
        raise IndexError(f"interval {iv} out of range for extent {t.shape[ax]}")


def slice_axis(t: np.ndarray, axis: str, iv: Interval) -> np.ndarray:
    """Copy of ``t`` restricted to ``iv`` along ``axis``."""
    ax = _axis(axis)
    _check_range(t, ax, iv)
    index = [slice(None)] * 5
    index[ax] = slice(iv.start, iv.end)
    return t[tuple(index)].copy()


def write_axis(dst: np.ndarray, axis: str, iv: Interval, src: np.ndarray) -> None:
    """Overwrite ``dst`` over ``iv`` along ``axis`` with ``src`` in place.

    Calls on pairwise-disjoint intervals of the same destination may run
    concurrently.
    """
    ax = _axis(axis)
    _check_range(dst, ax, iv)
    expected = list(dst.shape)
    expected[ax] = len(iv)
    if tuple(src.shape) != tuple(expected):
        raise ValueError(f"source shape {src.shape} does not fit {tuple(expected)}")
    index = [slice(None)] * 5
    index[ax] = slice(iv.start, iv.end)
    dst[tuple(index)] = src


_BINARY = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"dim mismatch: {a.shape} vs {b.shape}")
    try:
        fn = _BINARY[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def reduce(t: np.ndarray, op: str) -> float:
    """Scalar reduction with a fixed left-to-right accumulation order.

    Sums accumulate sequentially in double precision over the row-major
    layout, so the result is reproducible bit-for-bit.
    """
    flat = np.ascontiguousarray(t).ravel()
    if op == "sum":
        return float(np.cumsum(flat, dtype=np.float64)[-1])
    if op == "max":
        return float(flat.max())
    if op == "mean_abs":
        return float(np.cumsum(np.abs(flat), dtype=np.float64)[-1] / flat.size)
    raise ValueError(f"unknown reduction {op!r}")
