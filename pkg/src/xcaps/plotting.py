"""PNG figures that accompany the CSV/JSON outputs of the CLI."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .ratings import ATTRIBUTE_NAMES  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps the PNG bytes stable across reruns
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_training_log(rows: list[dict], path, title: str = "") -> Path:
    epochs = [r["epoch"] for r in rows]
    fig, (ax, ax_lr) = plt.subplots(2, 1, figsize=(6, 5), sharex=True, height_ratios=(3, 1))
    ax.plot(epochs, [r["train_total"] for r in rows], label="train total")
    ax.plot(epochs, [r["val_total"] for r in rows], label="val total")
    for key, style in (("train_lm", ":"), ("train_la", "--"), ("train_lr", "-.")):
        ax.plot(epochs, [r[key] for r in rows], style, linewidth=1, label=key)
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.set_title(title)
    ax_lr.semilogy(epochs, [r["lr"] for r in rows], color="k")
    ax_lr.set_ylabel("lr")
    ax_lr.set_xlabel("epoch")
    return _save(fig, path)


def plot_report(report: dict, path, title: str = "") -> Path:
    names = list(ATTRIBUTE_NAMES) + ["malignancy"]
    values = [report["attribute_accuracy"][n] for n in ATTRIBUTE_NAMES] + [report["malignancy_accuracy"]]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    bars = ax.bar(names, values, color=["#7a9cc6"] * 6 + ["#c6677a"])
    ax.bar_label(bars, labels=[f"{v:.2f}" for v in values], fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("within-one accuracy")
    ax.set_title(title or f"n = {report['n_samples']}")
    return _save(fig, path)


def plot_ablation(rows: list[dict], path) -> Path:
    names = [r["config"] for r in rows]
    acc = [r["malignancy_accuracy"] for r in rows]
    ref = [r["reference_full_scale"] for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(x - 0.2, acc, 0.4, label="this run")
    ax.bar(x + 0.2, ref, 0.4, label="full-scale reference", alpha=0.6)
    ax.set_xticks(x, names, rotation=15)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("malignancy within-one accuracy")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_sweep(grid: np.ndarray, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(4, 5.5))
    ax.imshow(grid, cmap="gray", vmin=0, vmax=1)
    ax.set_xlabel("delta")
    ax.set_ylabel("capsule dimension")
    ax.set_xticks([])
    ax.set_yticks([])
    ax.set_title(title)
    return _save(fig, path)
