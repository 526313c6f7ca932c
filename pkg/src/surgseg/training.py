"""Fine-tuning loop, segmentation loss, and finite-difference gradient checks.

The loss is mean binary cross-entropy on logits plus a soft-Dice term with
smoothing 1 in numerator and denominator:

    loss = l_bce * BCE(logits, gt) + l_dice * (1 - (2 <p, g> + 1) / (sum p + sum g + 1))

with p = sigmoid(logits). Only parameters the freeze policy marks
trainable ever change; the loop is deterministic for a fixed seed and
data order.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .checkpoint import archive_sha256, segmenter_arrays, segmenter_header
from .errors import ConfigError, DataError, InputError, NumericError
from .lora import FreezePolicy
from .metrics import frame_score
from .segmenter import Segmenter, bbox_from_mask, binarize


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 1e-3
    batch_size: int = 4
    lambda_bce: float = 1.0
    lambda_dice: float = 1.0
    seed: int = 0
    rank: int = 4
    alpha: float | None = None
    targets: tuple[str, ...] = ("q", "v")

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lambda_bce < 0 or self.lambda_dice < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.lambda_bce == 0 and self.lambda_dice == 0:
            raise ConfigError("loss weights must not both be zero")
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")


def seg_loss(
    logits: Tensor,
    gt: Tensor,
    lambda_bce: float = 1.0,
    lambda_dice: float = 1.0,
) -> Tensor:
    """Composite segmentation loss on (H, W) or (B, H, W) logits."""
    if logits.shape != gt.shape:
        raise InputError(f"logits shape {tuple(logits.shape)} != gt shape {tuple(gt.shape)}")
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite logits in seg_loss")
    if lambda_bce < 0 or lambda_dice < 0 or (lambda_bce == 0 and lambda_dice == 0):
        raise ConfigError("invalid loss weights")
    target = gt.to(logits.dtype)
    bce = F.binary_cross_entropy_with_logits(logits, target, reduction="mean")

    flat_logits = logits.reshape(-1, logits.shape[-2] * logits.shape[-1]) \
        if logits.dim() == 3 else logits.reshape(1, -1)
    flat_target = target.reshape(flat_logits.shape)
    p = torch.sigmoid(flat_logits)
    inter = (p * flat_target).sum(dim=1)
    dice = (2.0 * inter + 1.0) / (p.sum(dim=1) + flat_target.sum(dim=1) + 1.0)
    return lambda_bce * bce + lambda_dice * (1.0 - dice.mean())


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_loss: float
    val_miou: float | None = None


@dataclass
class TrainRecord:
    epochs: list[EpochStats] = field(default_factory=list)
    wall_time_s: float = 0.0
    checkpoint_sha256: str | None = None

    def write_log(self, path: str | Path) -> None:
        """Line-oriented log: one completed epoch per line."""
        lines = ["epoch\tloss\tval_miou"]
        for e in self.epochs:
            val = "" if e.val_miou is None else f"{e.val_miou:.6f}"
            lines.append(f"{e.epoch}\t{e.mean_loss:.6f}\t{val}")
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text("\n".join(lines) + "\n")

    def loss_monotone(self) -> bool:
        """Whether the per-epoch mean loss never increased (reported, not enforced)."""
        losses = [e.mean_loss for e in self.epochs]
        return all(b <= a for a, b in zip(losses, losses[1:]))

    def write_summary(self, path: str | Path) -> None:
        vals = [e.val_miou for e in self.epochs if e.val_miou is not None]
        summary = {
            "epochs": len(self.epochs),
            "final_loss": self.epochs[-1].mean_loss if self.epochs else None,
            "best_val_miou": max(vals) if vals else None,
            "loss_monotone": self.loss_monotone(),
            "wall_time_s": self.wall_time_s,
            "checkpoint_sha256": self.checkpoint_sha256,
        }
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def evaluate_segmenter(seg: Segmenter, pairs: Sequence[tuple[Tensor, Tensor]]) -> float:
    """Mean IoU over (frame, gt) pairs with ground-truth-derived box prompts."""
    if not pairs:
        raise DataError("no evaluation pairs")
    with torch.no_grad():
        ious = []
        for frame, gt in pairs:
            box = bbox_from_mask(gt)
            mask = binarize(seg(frame, box))
            ious.append(frame_score(mask, gt).iou)
    return float(np.mean(ious))


def fine_tune(
    seg: Segmenter,
    train_pairs: Sequence[tuple[Tensor, Tensor]],
    cfg: TrainConfig,
    policy: FreezePolicy | None = None,
    val_pairs: Sequence[tuple[Tensor, Tensor]] | None = None,
    log_dir: str | Path | None = None,
) -> TrainRecord:
    """Run exactly ``cfg.epochs`` passes over the data with Adam.

    Adapters must already be injected on ``seg``; the policy decides what
    trains. Frozen parameters are bit-identical afterwards. Loss
    monotonicity is reported in the record, never enforced.
    """
    if not train_pairs:
        raise DataError("training dataset is empty")
    policy = policy or FreezePolicy.default()
    policy.apply(seg)
    trainable = [p for p in seg.parameters() if p.requires_grad]
    if not trainable:
        raise ConfigError("freeze policy leaves nothing trainable")

    boxes = [bbox_from_mask(gt) for _, gt in train_pairs]
    opt = torch.optim.Adam(trainable, lr=cfg.learning_rate)
    record = TrainRecord()
    start = time.perf_counter()

    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_pairs))
        total, count = 0.0, 0
        seg.train()
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            images = torch.stack([train_pairs[i][0] for i in idx])
            gts = torch.stack([train_pairs[i][1] for i in idx])
            batch_boxes = [boxes[i] for i in idx]
            logits = seg.forward_batch(images, batch_boxes)
            loss = seg_loss(logits, gts, cfg.lambda_bce, cfg.lambda_dice)
            if not torch.isfinite(loss):
                raise NumericError(f"loss became non-finite at epoch {epoch}, step {lo}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        seg.eval()
        val = evaluate_segmenter(seg, val_pairs) if val_pairs else None
        record.epochs.append(EpochStats(epoch=epoch, mean_loss=total / count, val_miou=val))

    record.wall_time_s = time.perf_counter() - start
    record.checkpoint_sha256 = archive_sha256(segmenter_arrays(seg), segmenter_header(seg))

    if log_dir is not None:
        log_dir = Path(log_dir)
        record.write_log(log_dir / "train_log.tsv")
        record.write_summary(log_dir / "train_summary.json")
        from .figures import save_loss_curve

        save_loss_curve(
            [e.epoch for e in record.epochs],
            [e.mean_loss for e in record.epochs],
            [e.val_miou for e in record.epochs],
            log_dir / "loss_curve.png",
        )
    return record


@dataclass(frozen=True)
class GradCheckEntry:
    name: str
    max_abs_grad: float
    max_abs_err: float
    max_rel_err: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    step: float

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def entry(self, name: str) -> GradCheckEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)


def grad_check(
    named_params: Iterable[tuple[str, Tensor]],
    loss_fn: Callable[[], Tensor],
    step: float = 1e-5,
    rel_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare backprop gradients against central finite differences.

    Every entry of every named parameter is perturbed by +-step. Relative
    error denominators are floored at ``rel_floor`` so that near-zero
    gradient pairs do not blow up the ratio. Report-only: never raises on
    mismatch.
    """
    params = list(named_params)
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in params
    }

    entries = []
    with torch.no_grad():
        for name, p in params:
            flat = p.view(-1)
            a_flat = analytic[name].view(-1)
            max_abs_err = max_rel_err = 0.0
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                f_plus = float(loss_fn())
                flat[i] = orig - step
                f_minus = float(loss_fn())
                flat[i] = orig
                fd = (f_plus - f_minus) / (2.0 * step)
                a = float(a_flat[i])
                err = abs(a - fd)
                rel = err / max(abs(a), abs(fd), rel_floor)
                max_abs_err = max(max_abs_err, err)
                max_rel_err = max(max_rel_err, rel)
            entries.append(
                GradCheckEntry(
                    name=name,
                    max_abs_grad=float(analytic[name].abs().max()) if flat.numel() else 0.0,
                    max_abs_err=max_abs_err,
                    max_rel_err=max_rel_err,
                )
            )
    return GradCheckReport(entries=entries, step=step)
