"""Segmentation metrics: per-frame IoU / Dice / accuracy and their means.

All scores derive from the TP/FP/FN/TN pixel counts of a predicted vs
ground-truth binary mask:

    iou  = TP / (TP + FP + FN)
    dice = 2 TP / (2 TP + FP + FN)
    acc  = (TP/(TP+FN) + TN/(TN+FP)) / 2     (mean per-class recall)

Conventions: a frame with empty ground truth and empty prediction scores
1.0 on all three; a vacuous recall term (no pixels of that class in the
ground truth) counts as 1.0. Aggregates are unweighted means over frames,
scaled to percent and rounded half-up to two decimals only for display.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from torch import Tensor

from .errors import InputError


def _as_bool(mask: Tensor | np.ndarray) -> np.ndarray:
    if isinstance(mask, Tensor):
        mask = mask.detach().cpu().numpy()
    return np.asarray(mask, dtype=bool)


def pixel_counts(pred: Tensor | np.ndarray, gt: Tensor | np.ndarray) -> tuple[int, int, int, int]:
    """(TP, FP, FN, TN) pixel counts; exact integer arithmetic."""
    p, g = _as_bool(pred), _as_bool(gt)
    if p.shape != g.shape:
        raise InputError(f"pred shape {p.shape} != gt shape {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    return tp, fp, fn, tn


@dataclass(frozen=True)
class FrameScore:
    frame_index: int
    iou: float
    dice: float
    acc: float


def frame_score(
    pred: Tensor | np.ndarray,
    gt: Tensor | np.ndarray,
    frame_index: int = 0,
    pixel_acc: bool = False,
) -> FrameScore:
    """Score one frame.

    ``pixel_acc=True`` replaces mean per-class recall with plain pixel
    accuracy (TP + TN) / total.
    """
    tp, fp, fn, tn = pixel_counts(pred, gt)
    union = tp + fp + fn
    iou = 1.0 if union == 0 else tp / union
    dice = 1.0 if (2 * tp + fp + fn) == 0 else 2 * tp / (2 * tp + fp + fn)
    if pixel_acc:
        acc = (tp + tn) / (tp + fp + fn + tn)
    else:
        fg_recall = 1.0 if (tp + fn) == 0 else tp / (tp + fn)
        bg_recall = 1.0 if (tn + fp) == 0 else tn / (tn + fp)
        acc = (fg_recall + bg_recall) / 2
    return FrameScore(frame_index=frame_index, iou=iou, dice=dice, acc=acc)


def format_percent(percent: float) -> str:
    """Round half-up to two decimals, e.g. 40.125 -> "40.13"."""
    return str(Decimal(repr(float(percent))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass
class SegReport:
    """Per-frame scores plus their aggregate means for one (dataset, model) run."""

    scores: list[FrameScore]
    dataset: str = ""
    model: str = ""

    @property
    def mean_iou(self) -> float:
        return float(np.mean([s.iou for s in self.scores]))

    @property
    def mean_dice(self) -> float:
        return float(np.mean([s.dice for s in self.scores]))

    @property
    def mean_acc(self) -> float:
        return float(np.mean([s.acc for s in self.scores]))

    def formatted(self) -> dict[str, str]:
        """Display aggregates as percent strings: mIoU / mAcc / mDice."""
        return {
            "mIoU": format_percent(self.mean_iou * 100),
            "mAcc": format_percent(self.mean_acc * 100),
            "mDice": format_percent(self.mean_dice * 100),
        }

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "dataset": self.dataset,
            "model": self.model,
            "aggregate": {
                "miou": self.mean_iou,
                "macc": self.mean_acc,
                "mdice": self.mean_dice,
                **{k.lower() + "_pct": v for k, v in self.formatted().items()},
            },
            "frames": [
                {"frame_index": s.frame_index, "iou": s.iou, "dice": s.dice, "acc": s.acc}
                for s in self.scores
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SegReport":
        scores = [
            FrameScore(
                frame_index=int(f["frame_index"]),
                iou=float(f["iou"]),
                dice=float(f["dice"]),
                acc=float(f["acc"]),
            )
            for f in data["frames"]
        ]
        return cls(scores=scores, dataset=data.get("dataset", ""), model=data.get("model", ""))

    def save_json(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load_json(cls, path: str | Path) -> "SegReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def aggregate(
    scores: Iterable[FrameScore] | Sequence[FrameScore],
    dataset: str = "",
    model: str = "",
) -> SegReport:
    """Collect frame scores into a report; at least one score is required."""
    scores = list(scores)
    if not scores:
        raise InputError("cannot aggregate an empty score list")
    return SegReport(scores=scores, dataset=dataset, model=model)


def pooled_score(
    pairs: Sequence[tuple[Tensor | np.ndarray, Tensor | np.ndarray]],
    pixel_acc: bool = False,
) -> FrameScore:
    """Dataset-pooled alternative to per-frame averaging: TP/FP/FN/TN are
    accumulated over all (pred, gt) pairs before scoring once."""
    if not pairs:
        raise InputError("no mask pairs to pool")
    pooled_pred = np.concatenate([np.ravel(_as_bool(p)) for p, _ in pairs])
    pooled_gt = np.concatenate([np.ravel(_as_bool(g)) for _, g in pairs])
    return frame_score(pooled_pred, pooled_gt, frame_index=-1, pixel_acc=pixel_acc)
