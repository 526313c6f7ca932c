"""Matplotlib renderings saved next to the delimited report output."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .metrics import SegReport
from .report import ReportRow


def save_score_curve(report: SegReport, path: str | Path) -> None:
    """Per-frame IoU and Dice over the sequence."""
    frames = [s.frame_index for s in report.scores]
    fig, ax = plt.subplots(figsize=(6.0, 3.2))
    ax.plot(frames, [s.iou for s in report.scores], label="IoU", lw=1.2)
    ax.plot(frames, [s.dice for s in report.scores], label="Dice", lw=1.2, ls="--")
    ax.set_xlabel("frame")
    ax.set_ylabel("score")
    ax.set_ylim(0.0, 1.02)
    title = " / ".join(x for x in (report.dataset, report.model) if x) or "per-frame scores"
    ax.set_title(title)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metric_bars(rows: Sequence[ReportRow], path: str | Path) -> None:
    """Grouped bars of mIoU / mAcc / mDice per table row."""
    labels = [" / ".join(x for x in (r.dataset, r.model) if x) for r in rows]
    metrics = {
        "mIoU": [r.miou for r in rows],
        "mAcc": [r.macc for r in rows],
        "mDice": [r.mdice for r in rows],
    }
    x = range(len(rows))
    width = 0.27
    fig, ax = plt.subplots(figsize=(max(5.0, 1.8 * len(rows)), 3.4))
    for i, (name, values) in enumerate(metrics.items()):
        ax.bar([xi + (i - 1) * width for xi in x], values, width=width, label=name)
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, rotation=15, ha="right", fontsize=8)
    ax.set_ylabel("percent")
    ax.set_ylim(0, 102)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_curve(epochs: Sequence[int], losses: Sequence[float],
                    val_mious: Sequence[float | None], path: str | Path) -> None:
    """Training loss per epoch, with validation mIoU on a twin axis when present."""
    fig, ax = plt.subplots(figsize=(6.0, 3.2))
    ax.plot(epochs, losses, marker="o", ms=3, lw=1.2, color="tab:blue", label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss", color="tab:blue")
    vals = [(e, v) for e, v in zip(epochs, val_mious) if v is not None]
    if vals:
        ax2 = ax.twinx()
        ax2.plot(*zip(*vals), marker="s", ms=3, lw=1.2, color="tab:orange", label="val mIoU")
        ax2.set_ylabel("val mIoU", color="tab:orange")
        ax2.set_ylim(0.0, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
