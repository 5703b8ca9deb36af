"""CT volumes, segmentation masks, the ``.mvol`` container, HU windowing,
grid rounding and the body-region / spacing condition encoding."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

REGIONS = ("head_neck", "chest", "abdomen", "lower_body")
HU_WINDOW = (-1000.0, 1000.0)
HU_SANITY = (-1024.0, 3071.0)
N_LABELS = 128

MAGIC = b"MVOL"
VERSION = 1
KIND_CT, KIND_MASK = 0, 1
_HEADER = struct.Struct("<4sHBB3I3fBB6x")


class MvolError(ValueError):
    pass


def region_index(region: str) -> int:
    try:
        return REGIONS.index(region)
    except ValueError:
        raise ValueError(f"unknown region {region!r}; expected one of {REGIONS}") from None


@dataclass
class VolumeMeta:
    """Grid dims ``[d, h, w]``, spacing ``[sz, sy, sx]`` in mm and body-region coverage."""

    dims: tuple
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    top_region: str = "chest"
    bottom_region: str = "abdomen"

    def __post_init__(self):
        self.dims = tuple(int(v) for v in self.dims)
        self.spacing_mm = tuple(float(np.float32(v)) for v in self.spacing_mm)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive counts, got {self.dims}")
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing_mm}")
        if region_index(self.top_region) > region_index(self.bottom_region):
            raise ValueError(
                f"region order: top {self.top_region!r} lies below bottom {self.bottom_region!r}"
            )


@dataclass
class CtVolume:
    grid: np.ndarray  # [1, 1, d, h, w] float32 HU
    meta: VolumeMeta

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float32)
        if g.ndim == 3:
            g = g[None, None]
        if g.ndim != 5 or g.shape[:2] != (1, 1):
            raise ValueError(f"CT grid must be [1, 1, d, h, w], got {g.shape}")
        if g.shape[2:] != self.meta.dims:
            raise ValueError(f"grid dims {g.shape[2:]} do not match meta {self.meta.dims}")
        if not np.all(np.isfinite(g)):
            raise ValueError("CT volume contains non-finite values")
        lo, hi = HU_SANITY
        if g.min() < lo or g.max() > hi:
            raise ValueError(f"HU values outside [{lo:g}, {hi:g}]")
        self.grid = np.ascontiguousarray(g)


@dataclass
class SegMask:
    labels: np.ndarray  # [d, h, w] uint16
    meta: VolumeMeta = field(default=None)

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim == 5:
            lab = lab[0, 0]
        if lab.ndim != 3:
            raise ValueError(f"mask must be [d, h, w], got {lab.shape}")
        if lab.size and (lab.min() < 0 or lab.max() >= N_LABELS):
            raise ValueError(f"mask labels must lie in 0..{N_LABELS - 1}")
        self.labels = np.ascontiguousarray(lab.astype(np.uint16))
        if self.meta is None:
            self.meta = VolumeMeta(self.labels.shape)
        if self.meta.dims != self.labels.shape:
            raise ValueError("mask dims do not match meta")


# -- mvol container --------------------------------------------------------------

def write_mvol(path, v) -> None:
    if isinstance(v, CtVolume):
        kind, payload = KIND_CT, v.grid.astype("<f4").tobytes()
    elif isinstance(v, SegMask):
        kind, payload = KIND_MASK, v.labels.astype("<u2").tobytes()
    else:
        raise TypeError(f"cannot write {type(v).__name__} as mvol")
    m = v.meta
    header = _HEADER.pack(MAGIC, VERSION, kind, 0, *m.dims, *m.spacing_mm,
                          region_index(m.top_region), region_index(m.bottom_region))
    Path(path).write_bytes(header + payload)


def read_mvol(path):
    """Load a ``CtVolume`` or ``SegMask`` depending on the stored kind."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise MvolError("truncated header")
    magic, version, kind, _, d, h, w, sz, sy, sx, top, bottom = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise MvolError("bad magic")
    if version != VERSION:
        raise MvolError(f"version mismatch: file {version}, reader {VERSION}")
    if top >= len(REGIONS) or bottom >= len(REGIONS):
        raise MvolError("invalid region code")
    meta = VolumeMeta((d, h, w), (sz, sy, sx), REGIONS[top], REGIONS[bottom])
    count = d * h * w
    body = raw[_HEADER.size:]
    if kind == KIND_CT:
        dtype = np.dtype("<f4")
    elif kind == KIND_MASK:
        dtype = np.dtype("<u2")
    else:
        raise MvolError(f"unknown kind {kind}")
    if len(body) < count * dtype.itemsize:
        raise MvolError("truncated payload")
    if len(body) > count * dtype.itemsize:
        raise MvolError("trailing bytes after payload")
    data = np.frombuffer(body, dtype=dtype).reshape(d, h, w)
    if kind == KIND_CT:
        if not np.all(np.isfinite(data)):
            raise MvolError("non-finite values in payload")
        return CtVolume(data.astype(np.float32)[None, None], meta)
    return SegMask(data.astype(np.uint16), meta)


# -- intensity -------------------------------------------------------------------

def normalize_hu(v: CtVolume) -> np.ndarray:
    """Clip to the [-1000, 1000] HU window and map affinely onto [0, 1]."""
    lo, hi = HU_WINDOW
    return ((np.clip(v.grid, lo, hi) - lo) / (hi - lo)).astype(np.float32)


def denormalize_hu(t: np.ndarray, meta: VolumeMeta = None) -> CtVolume:
    lo, hi = HU_WINDOW
    t = np.asarray(t, dtype=np.float32)
    if meta is None:
        meta = VolumeMeta(t.shape[2:])
    return CtVolume((t * (hi - lo) + lo).astype(np.float32), meta)


# -- geometry --------------------------------------------------------------------

def nearest_multiple(n: int, m: int) -> int:
    """Closest positive multiple of ``m`` to ``n``; ties go up, zero becomes ``m``."""
    if m < 1:
        raise ValueError("multiple must be >= 1")
    q = (2 * n + m) // (2 * m)
    return max(q, 1) * m


def _linear_axis(a, new, axis):
    old = a.shape[axis]
    if new == old:
        return a
    src = (np.arange(new) + 0.5) * (old / new) - 0.5
    src = np.clip(src, 0, old - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, old - 1)
    frac = (src - i0).reshape([-1 if i == axis else 1 for i in range(a.ndim)])
    return np.take(a, i0, axis=axis) * (1 - frac) + np.take(a, i1, axis=axis) * frac


def resize_trilinear(grid: np.ndarray, dims) -> np.ndarray:
    """Separable linear resampling on half-voxel-centred coordinates (edge-clamped)."""
    out = grid.astype(np.float64)
    for axis, n in zip((-3, -2, -1), dims):
        out = _linear_axis(out, int(n), out.ndim + axis)
    return out.astype(np.float32)


def round_dims(v: CtVolume, multiple: int) -> CtVolume:
    """Resample every spatial dim to its nearest multiple, preserving physical extent."""
    dims = tuple(nearest_multiple(n, multiple) for n in v.meta.dims)
    if dims == v.meta.dims:
        return v
    spacing = tuple(s * o / n for s, o, n in zip(v.meta.spacing_mm, v.meta.dims, dims))
    meta = VolumeMeta(dims, spacing, v.meta.top_region, v.meta.bottom_region)
    return CtVolume(resize_trilinear(v.grid, dims), meta)


# -- conditioning ------------------------------------------------------------------

def encode_region(region: str) -> np.ndarray:
    code = np.zeros(len(REGIONS), dtype=np.float32)
    code[region_index(region)] = 1.0
    return code


@dataclass
class PrimaryCond:
    """Top/bottom body-region one-hots plus voxel spacing ``[sz, sy, sx]`` (mm)."""

    i_top: np.ndarray
    i_bottom: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        self.i_top = np.asarray(self.i_top, dtype=np.float32)
        self.i_bottom = np.asarray(self.i_bottom, dtype=np.float32)
        self.s = np.asarray(self.s, dtype=np.float32)
        for code in (self.i_top, self.i_bottom):
            if code.shape != (4,) or not np.isin(code, (0, 1)).all() or code.sum() != 1:
                raise ValueError(f"region code must be a one-hot 4-vector, got {code}")
        if self.s.shape != (3,) or np.any(self.s <= 0):
            raise ValueError(f"spacing must be three positive values, got {self.s}")

    @classmethod
    def from_regions(cls, top, bottom, spacing):
        return cls(encode_region(top), encode_region(bottom), spacing)

    def to_dict(self):
        return {"top": REGIONS[int(self.i_top.argmax())],
                "bottom": REGIONS[int(self.i_bottom.argmax())],
                "spacing_mm": [float(v) for v in self.s]}


def encode_primary_cond(meta: VolumeMeta) -> PrimaryCond:
    return PrimaryCond(encode_region(meta.top_region), encode_region(meta.bottom_region),
                       meta.spacing_mm)
