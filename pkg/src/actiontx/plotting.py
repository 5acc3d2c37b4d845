"""Report figures: per-class AP, AP by box area and count, attention maps."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import BinResult, EvalReport  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": "medium",
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "savefig.dpi": 120,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def per_class_ap(report: EvalReport, class_names: Sequence[str], frequency: Sequence[float], path) -> Path:
    """Bars of AP per class with the training-set class count on a twin axis."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.2))
        x = np.arange(len(class_names))
        ap = [report.per_class_ap.get(c, math.nan) for c in range(len(class_names))]
        ax.bar(x, np.nan_to_num(ap), color="#4c72b0", label="AP@%.2g" % report.iou_threshold)
        ax.set_xticks(x, class_names, rotation=30, ha="right")
        ax.set_ylim(0, 1)
        ax.set_ylabel("frame AP")
        ax2 = ax.twinx()
        ax2.plot(x, frequency, "o-", color="#dd8452", label="count")
        ax2.set_ylabel("training instances")
        ax2.spines["top"].set_visible(False)
        ax.set_title(f"mAP {report.map:.3f}")
        return _save(fig, path)


def binned_ap(bins: Sequence[BinResult], label: str, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        names = [_bin_label(b) for b in bins]
        ax.bar(range(len(bins)), [0.0 if math.isnan(b.map) else b.map for b in bins], color="#55a868")
        for i, b in enumerate(bins):
            ax.text(i, 0.02, f"n={b.n_gt}", ha="center", fontsize=7)
        ax.set_xticks(range(len(bins)), names, rotation=20, ha="right")
        ax.set_ylim(0, 1)
        ax.set_xlabel(label)
        ax.set_ylabel("mAP")
        return _save(fig, path)


def _bin_label(b: BinResult) -> str:
    lo = "-inf" if math.isinf(b.lo) else f"{b.lo:g}"
    hi = "inf" if math.isinf(b.hi) else f"{b.hi:g}"
    return f"[{lo}, {hi})"


def attention_maps(weights: np.ndarray, path, title: str = "") -> Path:
    """One panel per frame of a (T', H', W') weight grid, shared colour scale."""
    t = weights.shape[0]
    vmax = float(weights.max()) or 1.0
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, t, figsize=(1.4 * t + 0.6, 1.8), squeeze=False)
        for i, ax in enumerate(axes[0]):
            im = ax.imshow(weights[i], cmap="magma", vmin=0, vmax=vmax, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            ax.set_title(f"t={i}", fontsize=7)
        fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8)
        if title:
            fig.suptitle(title, fontsize=8)
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def report_figures(report: EvalReport, class_names: Sequence[str], frequency: Sequence[float],
                   out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [per_class_ap(report, class_names, frequency, out / "ap_per_class.png")]
    if report.area_bins:
        paths.append(binned_ap(report.area_bins, "GT box area (px²)", out / "ap_by_area.png"))
    if report.count_bins:
        paths.append(binned_ap(report.count_bins, "GT boxes per clip", out / "ap_by_count.png"))
    return paths
