"""Matplotlib renderers used by the experiment report path.

Every experiment that writes curve CSVs also drops a PNG next to them; these
helpers keep the style uniform (log sigma axis, shared grid, tight layout).
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_curves(series, out_path, title="", ylabel="value", logy=False):
    """Line chart of {label: (sigmas, values)} on a log sigma axis."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for label, (sigmas, values) in series.items():
        ax.plot(sigmas, values, marker="o", ms=3.5, lw=1.5, label=label)
    ax.set_xscale("log")
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(r"$\sigma$")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=140)
    plt.close(fig)


def save_twin_curves(sigmas, left, right, out_path, title="",
                     left_label="accuracy", right_label="SNR"):
    """Accuracy and SNR against sigma on twin y axes."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    ax.plot(sigmas, left, color="#1f77b4", marker="o", ms=3.5, label=left_label)
    ax.set_xscale("log")
    ax.set_xlabel(r"$\sigma$")
    ax.set_ylabel(left_label, color="#1f77b4")
    ax2 = ax.twinx()
    ax2.plot(sigmas, right, color="#d62728", marker="s", ms=3.5, label=right_label)
    ax2.set_ylabel(right_label, color="#d62728")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=140)
    plt.close(fig)


def save_scatter_grid(frames, out_path, title=""):
    """Row of 2-D scatter panels; frames = [(subtitle, xy array, labels), ...]."""
    k = len(frames)
    fig, axes = plt.subplots(1, k, figsize=(2.6 * k, 2.8), squeeze=False)
    for ax, (subtitle, xy, labels) in zip(axes[0], frames):
        for cls in np.unique(labels):
            pts = xy[labels == cls]
            ax.scatter(pts[:, 0], pts[:, 1], s=4, alpha=0.5, label=f"class {cls}")
        ax.set_title(subtitle, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=140)
    plt.close(fig)
