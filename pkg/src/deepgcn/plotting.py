"""Figures written next to the CSV outputs (Agg backend, files only)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def figure_path(csv_path, suffix=".png"):
    stem = str(csv_path)
    if stem.endswith(".csv"):
        stem = stem[:-4]
    return stem + suffix


def plot_loss_curves(curves, path, title="training loss"):
    """``curves`` maps a label to a sequence of per-epoch losses."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, losses in curves.items():
        ax.plot(np.arange(1, len(losses) + 1), losses, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    if curves:
        ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_class_iou(metrics, path, class_names=None):
    iou = np.asarray(metrics.per_class_iou, dtype=float)
    names = class_names or [f"class {i}" for i in range(len(iou))]
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(iou) + 2), 4))
    ax.bar(names, np.nan_to_num(iou), color="tab:blue")
    ax.axhline(metrics.mean_iou, color="tab:red", ls="--", label=f"mIoU {metrics.mean_iou:.3f}")
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    ax.set_title(f"OA {metrics.overall_accuracy:.3f}")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_ablation(rows, path):
    """Bar chart of mIoU per grid cell; failed cells are drawn empty."""
    labels, values = [], []
    for r in rows:
        labels.append(f"{r['backbone']}-{r['depth']}\nk{r['k']} w{r['width']} dil={r['dilation']} st={r['stochastic']}")
        try:
            values.append(float(r["miou"]))
        except (TypeError, ValueError):
            values.append(np.nan)
    fig, ax = plt.subplots(figsize=(max(5, 1.1 * len(rows) + 2), 4.5))
    ax.bar(np.arange(len(rows)), np.nan_to_num(np.array(values)), color="tab:green")
    ax.set_xticks(np.arange(len(rows)), labels, fontsize=7)
    ax.set_ylim(0, 1)
    ax.set_ylabel("mIoU")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
