"""Matplotlib figures written next to the tabular outputs.

Every function renders to a file and closes its figure; nothing is shown
interactively. PNG metadata is stripped so reruns produce identical bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import HEADER_LABELS, METRIC_RANGES, IqaReport  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "diffattack",
}

_PNG_META = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_loss_trace(trace: Sequence, path: str | Path, title: str = "loss") -> Path:
    """Weighted total and each raw term per iteration on a log axis."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.0), layout="constrained")
        it = np.arange(len(trace))
        for name, style in (("total", "-"), ("content", "--"), ("style", "-."), ("adv", ":"), ("smooth", (0, (1, 3)))):
            vals = np.array([getattr(b, name) for b in trace], dtype=float)
            if np.all(vals <= 0):
                continue
            ax.plot(it, np.where(vals > 0, vals, np.nan), linestyle=style, label=name, lw=1.2)
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_confidence(confidences: Sequence[float], threshold: float, path: str | Path, target_name: str = "") -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.0), layout="constrained")
        ax.plot(np.arange(len(confidences)), confidences, color="k", lw=1.2)
        ax.axhline(threshold, color="0.5", ls="--", lw=0.8)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("iteration")
        ax.set_ylabel(f"p({target_name})" if target_name else "target probability")
        return _save(fig, path)


def plot_report(report: IqaReport, path: str | Path) -> Path:
    """One panel per metric, bars per method, y-axis fixed to the metric's range."""
    metrics = [m for m in METRIC_RANGES if m in report.metrics]
    names = [n for n, _ in report.rows]
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, len(metrics), figsize=(2.2 * len(metrics), 2.8), layout="constrained", squeeze=False)
        shades = np.linspace(0.25, 0.8, len(names))
        for ax, m in zip(axes[0], metrics):
            vals = [report.value(n, m) for n in names]
            ax.bar(range(len(names)), vals, color=[str(s) for s in shades])
            ax.set_ylim(*METRIC_RANGES[m])
            ax.set_xticks(range(len(names)))
            ax.set_xticklabels(names, rotation=45, ha="right")
            ax.set_title(f"{HEADER_LABELS[m]} ↑")
        return _save(fig, path)


def plot_panels(images: Mapping[str, np.ndarray], path: str | Path) -> Path:
    """Side-by-side image panels (content, style, stylized, attacked, ...)."""
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, len(images), figsize=(2.0 * len(images), 2.3), layout="constrained", squeeze=False)
        for ax, (title, img) in zip(axes[0], images.items()):
            ax.imshow(img, interpolation="nearest")
            ax.set_title(title)
            ax.axis("off")
        return _save(fig, path)
