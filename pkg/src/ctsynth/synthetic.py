"""Seeded synthetic CT phantoms: a soft-tissue body in air with a few organ
blobs, plus the matching label mask.  Stand-in training data at desk scale."""
from __future__ import annotations

import numpy as np

from .volume import REGIONS, CtVolume, SegMask, VolumeMeta

# label id -> (HU mean, HU jitter)
ORGANS = {1: (60.0, 8.0), 3: (45.0, 6.0), 5: (30.0, 6.0), 10: (700.0, 60.0)}
BODY_HU = 20.0
AIR_HU = -1000.0


def _ellipsoid(shape, centre, radii):
    zz, yy, xx = np.meshgrid(*[np.arange(n) + 0.5 for n in shape], indexing="ij")
    r = ((zz - centre[0]) / radii[0]) ** 2 + ((yy - centre[1]) / radii[1]) ** 2 \
        + ((xx - centre[2]) / radii[2]) ** 2
    return r


def blob_phantom(rng, dims=(32, 32, 32), spacing=(1.5, 1.0, 1.0), regions=None):
    """Returns ``(CtVolume, SegMask)`` for one random phantom."""
    dims = tuple(dims)
    d, h, w = dims
    body_r = (0.55 * d, rng.uniform(0.32, 0.42) * h, rng.uniform(0.32, 0.42) * w)
    body = _ellipsoid(dims, (d / 2, h / 2, w / 2), body_r) <= 1.0
    hu = np.full(dims, AIR_HU, dtype=np.float64)
    hu[body] = BODY_HU
    labels = np.zeros(dims, dtype=np.uint16)
    for lab, (mean, jitter) in ORGANS.items():
        centre = (rng.uniform(0.3, 0.7) * d, rng.uniform(0.35, 0.65) * h, rng.uniform(0.35, 0.65) * w)
        radii = tuple(rng.uniform(0.08, 0.16) * n for n in dims)
        inside = (_ellipsoid(dims, centre, radii) <= 1.0) & body
        labels[inside] = lab
        hu[inside] = mean + rng.normal(0.0, jitter)
    hu += rng.normal(0.0, 5.0, dims) * body
    if regions is None:
        top = int(rng.integers(0, len(REGIONS)))
        bottom = int(rng.integers(top, len(REGIONS)))
        regions = (REGIONS[top], REGIONS[bottom])
    meta = VolumeMeta(dims, spacing, *regions)
    return CtVolume(hu.astype(np.float32)[None, None], meta), SegMask(labels, meta)


def blob_dataset(n, seed=0, dims=(32, 32, 32)):
    rng = np.random.default_rng(seed)
    return [blob_phantom(rng, dims) for _ in range(n)]


def smooth_latent(rng, dims=(8, 8, 8), channels=4, mode=None):
    """Unit-variance low-frequency latent: a few random cosine modes per channel."""
    grids = np.meshgrid(*[np.arange(n) / n for n in dims], indexing="ij")
    out = np.zeros((channels,) + tuple(dims))
    for c in range(channels):
        for _ in range(3):
            k = rng.integers(0, 2, 3)
            phase = rng.uniform(0, 2 * np.pi)
            out[c] += rng.normal() * np.cos(2 * np.pi * sum(ki * g for ki, g in zip(k, grids)) + phase)
    out -= out.mean()
    out /= out.std() + 1e-8
    return out.astype(np.float32)[None]


def toy_latent_set(seed=0, n=4, dims_variants=((8, 8, 8), (8, 8, 16))):
    """``n`` smooth latents alternating over ``dims_variants``, each with a random condition."""
    from .volume import PrimaryCond

    rng = np.random.default_rng(seed)
    items = []
    for i in range(n):
        dims = dims_variants[i % len(dims_variants)]
        top = int(rng.integers(0, len(REGIONS)))
        bottom = int(rng.integers(top, len(REGIONS)))
        cond = PrimaryCond.from_regions(REGIONS[top], REGIONS[bottom], rng.uniform(0.7, 3.0, 3))
        items.append((smooth_latent(rng, dims), cond))
    return items


def mask_latent(labels, factor=4, channels=4):
    """Latent fully determined by a label volume: per-organ occupancy pooled by ``factor``.

    Channel ``i`` holds the block-averaged indicator of the ``i``-th organ in
    ``ORGANS``, standardised to zero mean and unit variance.
    """
    labels = np.asarray(labels)
    d, h, w = (n // factor for n in labels.shape)
    out = np.zeros((channels, d, h, w))
    for c, lab in enumerate(list(ORGANS)[:channels]):
        occ = (labels == lab).astype(np.float64)
        out[c] = occ.reshape(d, factor, h, factor, w, factor).mean(axis=(1, 3, 5))
    out -= out.mean()
    out /= out.std() + 1e-8
    return out.astype(np.float32)[None]
