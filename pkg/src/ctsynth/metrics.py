"""Reconstruction metrics and the organ median-HU quality gate."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume import CtVolume, SegMask


def psnr(a, b, data_range: float) -> float:
    """``10 log10(range^2 / MSE)``; identical inputs give ``math.inf``."""
    if a.shape != b.shape:
        raise ValueError(f"dim mismatch: {a.shape} vs {b.shape}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def _box_mean(x, win):
    """Means over every fully contained ``win`` box of a 3-D array (summed-area table)."""
    s = np.pad(x, [(1, 0)] * 3).cumsum(0).cumsum(1).cumsum(2)
    a, b, c = win
    total = (s[a:, b:, c:] - s[:-a, b:, c:] - s[a:, :-b, c:] - s[a:, b:, :-c]
             + s[:-a, :-b, c:] + s[:-a, b:, :-c] + s[a:, :-b, :-c] - s[:-a, :-b, :-c])
    return total / (a * b * c)


def ssim3d(a, b, data_range: float, window: int = 7, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all uniform ``window**3`` boxes (population statistics).

    Inputs are ``[n, c, d, h, w]`` or ``[d, h, w]``; the window shrinks to fit
    volumes smaller than it, and the score is averaged over every (n, c) volume.
    """
    if a.shape != b.shape:
        raise ValueError(f"dim mismatch: {a.shape} vs {b.shape}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    a = np.asarray(a, np.float64).reshape((-1,) + a.shape[-3:])
    b = np.asarray(b, np.float64).reshape((-1,) + b.shape[-3:])
    win = tuple(min(window, n) for n in a.shape[1:])
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    scores = []
    for x, y in zip(a, b):
        mx, my = _box_mean(x, win), _box_mean(y, win)
        vx = _box_mean(x * x, win) - mx * mx
        vy = _box_mean(y * y, win) - my * my
        cxy = _box_mean(x * y, win) - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def median_hu_per_label(ct: CtVolume, mask: SegMask) -> dict:
    """Lower median HU of each nonzero label present in the mask."""
    grid = ct.grid[0, 0]
    if grid.shape != mask.labels.shape:
        raise ValueError(f"dims mismatch: CT {grid.shape} vs mask {mask.labels.shape}")
    labels = mask.labels.ravel()
    values = grid.ravel()
    out = {}
    for lab in np.unique(labels):
        if lab == 0:
            continue
        vals = values[labels == lab]
        k = (vals.size - 1) // 2
        out[int(lab)] = float(np.partition(vals, k)[k])
    return out


class NothingCheckedError(ValueError):
    """No mask label has a configured range."""


@dataclass
class QualityRanges:
    bounds: dict  # label id -> (lo_hu, hi_hu), inclusive

    def __post_init__(self):
        self.bounds = {int(k): (float(v[0]), float(v[1])) for k, v in self.bounds.items()}
        for lab, (lo, hi) in self.bounds.items():
            if lo > hi:
                raise ValueError(f"range for label {lab} has lo > hi")

    @classmethod
    def load(cls, path):
        return cls(json.loads(Path(path).read_text()))

    def to_json(self):
        return {str(k): [lo, hi] for k, (lo, hi) in sorted(self.bounds.items())}


# Illustrative only: plausible soft-tissue windows for a handful of label ids.
ILLUSTRATIVE_RANGES = QualityRanges({
    1: (20.0, 120.0),    # liver
    3: (20.0, 120.0),    # spleen
    4: (0.0, 100.0),     # pancreas
    5: (10.0, 120.0),    # kidney
})


def quality_check(ct: CtVolume, mask: SegMask, ranges: QualityRanges) -> dict:
    """Pass iff every labelled organ with a configured range has its median inside it."""
    medians = median_hu_per_label(ct, mask)
    checked = [lab for lab in sorted(medians) if lab in ranges.bounds]
    if not checked:
        raise NothingCheckedError("nothing checked: no mask label has a configured range")
    violations = []
    for lab in checked:
        lo, hi = ranges.bounds[lab]
        med = medians[lab]
        if not lo <= med <= hi:
            violations.append({"label": lab, "median": med, "lo": lo, "hi": hi})
    return {"pass": not violations, "violations": violations}
