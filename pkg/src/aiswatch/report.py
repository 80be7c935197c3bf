"""Delimited reports and matplotlib figures for training, evaluation, and
synthetic data inspection. Uses the Agg backend so rendering works headless.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402 (backend must be set first)
import numpy as np  # noqa: E402

from .synth import SynthTrack  # noqa: E402
from .training import EpochLog, EvalResult  # noqa: E402


def write_confusion_csv(path: str | Path, result: EvalResult) -> None:
    """Matrix CSV: rows are truth, columns are predictions."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["truth"] + list(result.class_names))
        for name, row in zip(result.class_names, result.confusion):
            writer.writerow([name] + [int(v) for v in row])


def plot_confusion(path: str | Path, result: EvalResult) -> None:
    n = len(result.class_names)
    fig, ax = plt.subplots(figsize=(1.2 * n + 2, 1.2 * n + 1.5))
    im = ax.imshow(result.confusion, cmap="Blues")
    ax.set_xticks(range(n), result.class_names, rotation=45, ha="right")
    ax.set_yticks(range(n), result.class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("truth")
    ax.set_title(f"accuracy {result.accuracy:.3f}")
    thresh = result.confusion.max() / 2 if result.confusion.max() else 0.5
    for i in range(n):
        for j in range(n):
            v = int(result.confusion[i, j])
            ax.text(j, i, str(v), ha="center", va="center",
                    color="white" if v > thresh else "black")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_training_log_csv(path: str | Path, log: list[EpochLog]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for row in log:
            writer.writerow([row.epoch, repr(row.train_loss), repr(row.val_loss)])


def plot_training_curves(path: str | Path, log: list[EpochLog],
                         best_epoch: int | None = None) -> None:
    epochs = [row.epoch for row in log]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(epochs, [row.train_loss for row in log], marker="o",
            label="train loss")
    ax.plot(epochs, [row.val_loss for row in log], marker="s",
            label="validation loss")
    if best_epoch is not None:
        ax.axvline(best_epoch, color="gray", linestyle="--",
                   label=f"selected epoch {best_epoch}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("weighted cross-entropy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_track_gallery(path: str | Path, tracks: list[SynthTrack],
                       per_regime: int = 3) -> None:
    """Small-multiples of generated trajectories, one row per regime."""
    by_regime: dict = {}
    for t in tracks:
        by_regime.setdefault(t.regime, []).append(t)
    regimes = sorted(by_regime, key=lambda r: r.value)
    rows = len(regimes)
    cols = max(1, min(per_regime, max(len(v) for v in by_regime.values())))
    fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 2.8 * rows),
                             squeeze=False)
    for i, regime in enumerate(regimes):
        for j in range(cols):
            ax = axes[i][j]
            if j < len(by_regime[regime]):
                track = by_regime[regime][j]
                lats = np.array([m.lat for m in track.window.messages])
                lons = np.array([m.lon for m in track.window.messages])
                ax.plot(lons, lats, linewidth=0.8)
                ax.plot(lons[0], lats[0], "g^", markersize=4)
                ax.plot(lons[-1], lats[-1], "rv", markersize=4)
                ax.set_title(f"{regime.value} ({track.activity})", fontsize=8)
            ax.tick_params(labelsize=6)
            ax.ticklabel_format(useOffset=False, style="plain")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
