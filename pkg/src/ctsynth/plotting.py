"""Report figures written next to the CSV outputs (headless Agg backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_benchmark(rows, path):
    """Peak memory (analytic and measured) and wall time against segment count, per mode."""
    with plt.rc_context(STYLE):
        fig, (ax_mem, ax_t) = plt.subplots(1, 2, figsize=(8, 3.2))
        mono = [r for r in rows if r["mode"] == "monolithic"]
        for mode in sorted({r["mode"] for r in rows} - {"monolithic"}):
            sel = sorted((r for r in rows if r["mode"] == mode), key=lambda r: r["n_segments"])
            n = [r["n_segments"] for r in sel]
            ax_mem.plot(n, [r["analytic_peak_bytes"] / 2**20 for r in sel], "o--", label=f"{mode} analytic")
            ax_mem.plot(n, [r["measured_peak_bytes"] / 2**20 for r in sel], "s-", label=f"{mode} measured")
            ax_t.plot(n, [r["wall_ms"] for r in sel], "o-", label=mode)
        if mono:
            ax_mem.axhline(mono[0]["measured_peak_bytes"] / 2**20, color="k", lw=0.8, label="monolithic measured")
            ax_t.axhline(mono[0]["wall_ms"], color="k", lw=0.8, label="monolithic")
        ax_mem.set_xlabel("segments")
        ax_mem.set_ylabel("peak MiB")
        ax_t.set_xlabel("segments")
        ax_t.set_ylabel("wall ms")
        ax_mem.legend(fontsize=7)
        ax_t.legend(fontsize=7)
        return _save(fig, path)


def plot_losses(records, path, keys=None):
    """Loss curves from training records (dicts sharing a ``step`` key)."""
    if not records:
        raise ValueError("no records to plot")
    keys = keys or [k for k in records[0] if k not in ("step", "lr", "t", "dims")]
    steps = [r["step"] for r in records]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for k in keys:
            ax.plot(steps, [float(r[k]) for r in records], lw=1, label=k)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(fontsize=7)
        return _save(fig, path)


def plot_slices(volumes, titles, path, window=(-1000.0, 1000.0)):
    """Mid-axial, mid-coronal and mid-sagittal slices, one row per volume."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(volumes), 3, figsize=(7, 2.4 * len(volumes)), squeeze=False)
        for row, (vol, title) in zip(axes, zip(volumes, titles)):
            g = np.asarray(vol).reshape(np.shape(vol)[-3:])
            d, h, w = g.shape
            for ax, img in zip(row, (g[d // 2], g[:, h // 2], g[:, :, w // 2])):
                ax.imshow(img, cmap="gray", vmin=window[0], vmax=window[1], origin="lower")
                ax.set_xticks([])
                ax.set_yticks([])
                ax.grid(False)
            row[0].set_ylabel(title)
        return _save(fig, path)
