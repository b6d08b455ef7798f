"""Matplotlib figures for reports and grid summaries, rendered straight to PNG files."""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .detector import TriggerCandidate  # noqa: E402
from .judge import DetectionReport  # noqa: E402

# no timestamps or version strings, so identical inputs give identical bytes
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def anomaly_chart(report: DetectionReport, path, threshold: float | None = None) -> Path:
    """Bar chart of per-class anomaly index; flagged classes in red."""
    classes = sorted(report.scores)
    index = [report.scores[k].anomaly_index for k in classes]
    colors = ["tab:red" if k in report.flagged else "tab:gray" for k in classes]
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar([str(k) for k in classes], index, color=colors)
    threshold = threshold if threshold is not None else report.config.get("threshold", 2.0)
    ax.axhline(threshold, color="black", linestyle="--", linewidth=1)
    ax.set_xlabel("class")
    ax.set_ylabel("anomaly index")
    ax.set_title(f"{report.mode}: {report.verdict}")
    fig.tight_layout()
    return _save(fig, path)


def quality_chart(report: DetectionReport, path) -> Path:
    """Per-class metric A; infinite values are drawn as hatched empty bars."""
    classes = sorted(report.scores)
    values = [report.scores[k].A for k in classes]
    finite = [v for v in values if math.isfinite(v)]
    top = max(finite) if finite else 0.0
    fig, ax = plt.subplots(figsize=(5, 3))
    for k, v in zip(classes, values):
        if math.isfinite(v):
            ax.bar(str(k), v, color="tab:red" if k in report.flagged else "tab:blue")
        else:
            ax.bar(str(k), top, fill=False, hatch="//")
    ax.set_xlabel("class")
    ax.set_ylabel("A (lower = more trigger-like)")
    fig.tight_layout()
    return _save(fig, path)


def trigger_panel(cands: dict[int, TriggerCandidate], path, tau: float = 0.01,
                  truth: np.ndarray | None = None) -> Path:
    """Restored M * delta and binarized mask per class, optionally beside the planted mask."""
    classes = sorted(cands)
    rows = 3 if truth is not None else 2
    fig, axes = plt.subplots(rows, max(len(classes), 1), figsize=(1.6 * max(len(classes), 1), 1.6 * rows),
                             squeeze=False)
    for col, k in enumerate(classes):
        trig = cands[k].trigger_array()
        peak = float(trig.max())
        img = trig / peak if peak > 0 else trig
        axes[0, col].imshow(img if img.shape[2] == 3 else img[..., 0], cmap="gray", vmin=0, vmax=1)
        axes[0, col].set_title(f"class {k}", fontsize=8)
        axes[1, col].imshow(cands[k].binarized(tau), cmap="gray", vmin=0, vmax=1)
        if truth is not None:
            axes[2, col].imshow(truth, cmap="gray", vmin=0, vmax=1)
    for ax in axes.flat:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    return _save(fig, path)


def grid_chart(rows: list[dict], path) -> Path:
    """Grouped F1 bars per grid cell, one bar per detection mode."""
    cells = sorted({(r["shape"], int(r["size"]), r["position"]) for r in rows})
    modes = sorted({r["mode"] for r in rows})
    f1 = {(r["shape"], int(r["size"]), r["position"], r["mode"]): float(r["f1"]) for r in rows}
    x = np.arange(len(cells))
    width = 0.8 / max(len(modes), 1)
    fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(cells)), 3))
    for i, mode in enumerate(modes):
        ax.bar(x + i * width, [f1.get((*c, mode), 0.0) for c in cells], width, label=mode)
    ax.set_xticks(x + width * (len(modes) - 1) / 2)
    ax.set_xticklabels([f"{s}{'' if shape == 'square' else 'b'}{p}" for shape, s, p in cells], rotation=45)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("F1")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def trace_chart(traces: dict[int, list[dict]], path) -> Path:
    """Attack success and mask L1 along each class's solve."""
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3))
    for k in sorted(traces):
        epochs = [t["epoch"] for t in traces[k]]
        a1.plot(epochs, [t["attack_success"] for t in traces[k]], label=str(k))
        a2.plot(epochs, [t["mask_l1"] for t in traces[k]], label=str(k))
    a1.set_xlabel("epoch")
    a1.set_ylabel("attack success")
    a2.set_xlabel("epoch")
    a2.set_ylabel("mask L1")
    a2.legend(fontsize=7, title="class")
    fig.tight_layout()
    return _save(fig, path)
