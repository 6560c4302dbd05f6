"""Figures written to files (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


def spectrogram_png(values: np.ndarray, path, title: str = "") -> Path:
    """Normalized mel spectrogram, low frequencies at the bottom."""
    fig, ax = plt.subplots(figsize=(4, 3.4))
    im = ax.imshow(np.asarray(values), origin="lower", aspect="auto", cmap="magma", vmin=0, vmax=1)
    ax.set_xlabel("frame")
    ax.set_ylabel("mel bin")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path)


def pairs_png(preds: Sequence[np.ndarray], targets: Sequence[np.ndarray], path, labels: Optional[Sequence[str]] = None) -> Path:
    n = len(preds)
    fig, axes = plt.subplots(2, n, figsize=(2.2 * n, 4.4), squeeze=False)
    for i, (p, t) in enumerate(zip(preds, targets)):
        for row, img, name in ((0, t, "target"), (1, p, "predicted")):
            ax = axes[row, i]
            ax.imshow(np.asarray(img), origin="lower", aspect="auto", cmap="magma", vmin=0, vmax=1)
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_ylabel(name)
        if labels is not None:
            axes[0, i].set_title(labels[i], fontsize=8)
    return _save(fig, path)


def training_curves_png(history: Sequence[dict], path) -> Path:
    epochs = [r["epoch"] for r in history]
    has_d = bool(history) and "loss_D" in history[0]
    fig, axes = plt.subplots(1, 3 if has_d else 2, figsize=(12 if has_d else 8, 3.2))
    axes[0].plot(epochs, [r["l1"] for r in history], label="L1")
    axes[0].plot(epochs, [r["loss_T"] for r in history], label="translator loss", alpha=0.7)
    if has_d:
        axes[0].plot(epochs, [r["loss_D"] for r in history], label="discriminator loss", alpha=0.7)
    axes[0].set_yscale("log")
    axes[0].legend(fontsize=8)
    axes[1].plot(epochs, [r["corr2d_train"] for r in history])
    axes[1].set_ylabel("Corr2D (train)")
    if has_d:
        axes[2].plot(epochs, [r["d_real_acc"] for r in history], label="real")
        axes[2].plot(epochs, [r["d_fake_acc"] for r in history], label="fake")
        axes[2].set_ylim(-0.05, 1.05)
        axes[2].set_ylabel("discriminator accuracy")
        axes[2].legend(fontsize=8)
    for ax in axes:
        ax.set_xlabel("epoch")
    return _save(fig, path)


def benchmark_png(rows, path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.4))
    for mode, marker in (("windowed", "o"), ("dense", "s")):
        sel = sorted((r for r in rows if r.mode == mode), key=lambda r: r.T)
        ax.loglog([r.T for r in sel], [r.median_ms for r in sel], marker=marker, label=mode, base=2)
    ax.set_xlabel("sequence length T")
    ax.set_ylabel("median time (ms)")
    ax.legend()
    return _save(fig, path)


def eval_png(reports, path) -> Path:
    labels, means, stds = [], [], []
    for r in reports:
        agg = r.aggregate().get("corr2d")
        if agg is None:
            continue
        labels.append(f"{r.temporal}\n{'GAN' if r.gan else 'no GAN'}")
        means.append(agg["mean"])
        stds.append(agg["std"])
    fig, ax = plt.subplots(figsize=(1.6 * max(len(labels), 2) + 1, 3.4))
    ax.bar(range(len(labels)), means, yerr=stds, capsize=4, color="tab:blue")
    ax.set_xticks(range(len(labels)), labels)
    ax.set_ylabel("held-out Corr2D")
    ax.set_ylim(min(0.0, min(means, default=0.0)), 1.0)
    return _save(fig, path)
