import json
import math

import numpy as np
import pytest

from ctsynth.metrics import (ILLUSTRATIVE_RANGES, NothingCheckedError, QualityRanges, median_hu_per_label,
                             psnr, quality_check, ssim3d)
from ctsynth.volume import CtVolume, SegMask, VolumeMeta

from oracles import naive_ssim


def test_psnr_examples(rng):
    a = rng.random((4, 4, 4))
    assert psnr(a, a, 1.0) == math.inf
    assert psnr(a, a + 0.5, 1.0) == pytest.approx(10 * math.log10(4), abs=1e-9)
    assert psnr(a, a + 0.5, 1.0) == pytest.approx(6.02, abs=5e-3)
    with pytest.raises(ValueError):
        psnr(a, a[:2], 1.0)
    with pytest.raises(ValueError):
        psnr(a, a, 0.0)


def test_psnr_matches_direct_formula(rng):
    a, b = rng.random((5, 6, 7)), rng.random((5, 6, 7))
    mse = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert psnr(a, b, 1.0) == pytest.approx(10 * math.log10(1 / mse), abs=1e-5)


def test_ssim_identity_and_oracle(rng):
    a = rng.random((9, 8, 10))
    assert ssim3d(a, a, 1.0) == pytest.approx(1.0, abs=1e-12)
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    assert ssim3d(a, b, 1.0) == pytest.approx(naive_ssim(a, b, 1.0), abs=1e-5)
    small = rng.random((3, 4, 5)), rng.random((3, 4, 5))
    assert ssim3d(*small, 1.0) == pytest.approx(naive_ssim(*small, 1.0), abs=1e-5)
    # 5-D input averages over the leading volumes
    stacked = ssim3d(np.stack([a, a])[:, None], np.stack([a, b])[:, None], 1.0)
    assert stacked == pytest.approx((1 + naive_ssim(a, b, 1.0)) / 2, abs=1e-5)


def test_ssim_symmetric_and_bounded(rng):
    for _ in range(5):
        a, b = rng.standard_normal((6, 6, 6)), rng.standard_normal((6, 6, 6))
        s = ssim3d(a, b, 4.0)
        assert s == pytest.approx(ssim3d(b, a, 4.0), abs=1e-12)
        assert -1 <= s <= 1
    assert psnr(a, b, 1.0) == pytest.approx(psnr(b, a, 1.0))


def volume_pair(values_by_label, dims=(4, 4, 4), background=-1000.0):
    grid = np.full(dims, background, np.float32)
    labels = np.zeros(dims, np.uint16)
    flat_g, flat_l = grid.reshape(-1), labels.reshape(-1)
    pos = 0
    for lab, values in values_by_label.items():
        for v in values:
            flat_g[pos], flat_l[pos] = v, lab
            pos += 1
    meta = VolumeMeta(dims)
    return CtVolume(grid[None, None], meta), SegMask(labels, meta)


def test_median_examples():
    ct, mask = volume_pair({1: [50.0] * 10})
    assert median_hu_per_label(ct, mask) == {1: 50.0}
    ct, mask = volume_pair({3: [30.0, 10.0, 20.0]})
    assert median_hu_per_label(ct, mask) == {3: 20.0}
    ct, mask = volume_pair({3: [40.0, 10.0, 30.0, 20.0]})
    assert median_hu_per_label(ct, mask) == {3: 20.0}  # lower median


def test_median_matches_sort_oracle(rng):
    for _ in range(5):
        dims = (5, 6, 7)
        grid = rng.uniform(-200, 200, dims).astype(np.float32)
        labels = rng.integers(0, 5, dims)
        meta = VolumeMeta(dims)
        got = median_hu_per_label(CtVolume(grid[None, None], meta), SegMask(labels, meta))
        for lab in range(1, 5):
            vals = sorted(grid[labels == lab])
            assert got[lab] == vals[(len(vals) - 1) // 2]


def test_median_dims_mismatch():
    ct, _ = volume_pair({1: [1.0]})
    with pytest.raises(ValueError):
        median_hu_per_label(ct, SegMask(np.zeros((2, 2, 2))))


def test_quality_check_outcomes():
    ranges = QualityRanges({1: (20, 120), 5: (10, 120)})
    ct, mask = volume_pair({1: [60.0] * 5, 5: [30.0] * 5})
    assert quality_check(ct, mask, ranges) == {"pass": True, "violations": []}
    ct, mask = volume_pair({1: [300.0] * 5, 5: [30.0] * 5})
    rep = quality_check(ct, mask, ranges)
    assert not rep["pass"]
    assert rep["violations"] == [{"label": 1, "median": 300.0, "lo": 20.0, "hi": 120.0}]
    ct, mask = volume_pair({})
    with pytest.raises(NothingCheckedError, match="nothing checked"):
        quality_check(ct, mask, ranges)
    ct, mask = volume_pair({7: [0.0]})
    with pytest.raises(NothingCheckedError):
        quality_check(ct, mask, ranges)


def test_quality_ranges_io(tmp_path):
    path = tmp_path / "r.json"
    path.write_text(json.dumps(ILLUSTRATIVE_RANGES.to_json()))
    assert QualityRanges.load(path).bounds == ILLUSTRATIVE_RANGES.bounds
    with pytest.raises(ValueError):
        QualityRanges({1: (5, 1)})
