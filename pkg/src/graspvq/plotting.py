"""Figures written next to the delimited outputs: sweep curves, loss curves, grasp maps."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Polygon  # noqa: E402

MAP_COLORMAPS = {"quality": "viridis", "angle": "hsv", "width": "magma"}


def plot_sweep(records, path):
    """Mean test accuracy (with per-seed spread) against labelled ratio, one line per method."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for method in sorted({r.method for r in records}):
        rows = [r for r in records if r.method == method and r.status == "ok"]
        ratios = sorted({r.labelled_ratio for r in rows})
        if not ratios:
            continue
        acc = [[r.test_accuracy * 100 for r in rows if r.labelled_ratio == x] for x in ratios]
        mean = [np.mean(a) for a in acc]
        ax.plot(ratios, mean, marker="o", label=method)
        if any(len(a) > 1 for a in acc):
            lo = [np.min(a) for a in acc]
            hi = [np.max(a) for a in acc]
            ax.fill_between(ratios, lo, hi, alpha=0.2)
    ax.set_xlabel("Labelled data ratio")
    ax.set_ylabel("Test accuracy (%)")
    ax.grid(axis="y", alpha=0.4)
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_losses(curves: dict, path, title: str = ""):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, values in curves.items():
        if values:
            ax.plot(np.arange(1, len(values) + 1), values, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    if title:
        ax.set_title(title)
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def _save_map(values: np.ndarray, cmap: str, path) -> dict:
    lo, hi = float(np.min(values)), float(np.max(values))
    norm = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    plt.imsave(path, norm, cmap=cmap, vmin=0.0, vmax=1.0)
    return {"colormap": cmap, "min": lo, "max": hi, "normalization": "per-map min-max"}


def render_prediction(image: np.ndarray, maps, grasp, out_dir, width_scale: float) -> dict:
    """Write quality/angle/width PNGs and the annotated input; returns the colour scales."""
    out_dir = Path(out_dir)
    scale = {
        "quality": _save_map(maps.quality, MAP_COLORMAPS["quality"], out_dir / "quality.png"),
        "angle": _save_map(maps.angle(), MAP_COLORMAPS["angle"], out_dir / "angle.png"),
        "width": _save_map(maps.width * width_scale, MAP_COLORMAPS["width"], out_dir / "width.png"),
    }
    fig, ax = plt.subplots(figsize=(4, 4))
    if image.shape[0] == 1:
        ax.imshow(image[0], cmap="gray", vmin=0, vmax=1)
    else:
        ax.imshow(np.clip(image.transpose(1, 2, 0), 0, 1))
    corners = grasp.corners()
    ax.add_patch(Polygon(corners, closed=True, fill=False, edgecolor="red", linewidth=1.5))
    # jaw edges drawn thicker
    for a, b in ((1, 2), (3, 0)):
        ax.plot(*zip(corners[a], corners[b]), color="lime", linewidth=2.5)
    ax.plot(grasp.center_col, grasp.center_row, "o", color="yellow", markersize=3)
    ax.set_title(f"q={grasp.quality:.2f}  angle={math.degrees(grasp.angle):.0f} deg")
    ax.axis("off")
    fig.tight_layout()
    fig.savefig(out_dir / "annotated.png", dpi=120)
    plt.close(fig)
    return scale
