"""Two-stage inference: the prompted segmenter masks the first k frames,
and those masks seed the memory tracker for the rest of the video."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import torch
from torch import Tensor

from .data import VideoSequence, save_mask_png
from .errors import ConfigError, DataError
from .metrics import SegReport, aggregate, frame_score
from .segmenter import BoxPrompt, Segmenter, bbox_from_mask
from .tracker import MemoryConfig, Tracker, propagate


@dataclass(frozen=True)
class PipelineConfig:
    seed_frames: int = 1  # how many initial frames the segmenter handles
    prompt_source: str = "gt-box"  # "gt-box" | "user-box"
    user_boxes: Mapping[int, BoxPrompt] | None = None
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    seed_indices: tuple[int, ...] | None = None  # explicit seed frames, else 0..k-1

    def __post_init__(self) -> None:
        if self.seed_frames < 1:
            raise ConfigError("seed_frames must be >= 1")
        if self.prompt_source not in ("gt-box", "user-box"):
            raise ConfigError(f"unknown prompt source '{self.prompt_source}'")
        if self.seed_indices is not None and not self.seed_indices:
            raise ConfigError("seed_indices must not be empty when given")

    def resolve_seeds(self, num_frames: int) -> list[int]:
        if self.seed_indices is not None:
            indices = sorted(set(self.seed_indices))
            bad = [i for i in indices if not 0 <= i < num_frames]
            if bad:
                raise ConfigError(f"seed indices {bad} outside sequence of {num_frames} frames")
            return indices
        if self.seed_frames > num_frames:
            raise ConfigError(
                f"seed_frames {self.seed_frames} exceeds sequence length {num_frames}"
            )
        return list(range(self.seed_frames))


@dataclass
class PipelineResult:
    masks: Tensor  # (T, H, W) bool, one mask per input frame
    report: SegReport | None
    seed_indices: list[int]


def _seed_box(video: VideoSequence, t: int, cfg: PipelineConfig) -> BoxPrompt:
    if cfg.prompt_source == "user-box":
        if cfg.user_boxes is None or t not in cfg.user_boxes:
            raise DataError(f"no user box supplied for seed frame {t}")
        return cfg.user_boxes[t]
    if video.masks is None:
        raise DataError(f"seed frame {t} needs ground truth for a gt-box prompt")
    if not bool(video.masks[t].any()):
        raise DataError(f"seed frame {t} has empty ground truth, prompt unresolvable")
    return bbox_from_mask(video.masks[t])


def run_pipeline(
    video: VideoSequence,
    segmenter: Segmenter,
    tracker: Tracker | None,
    cfg: PipelineConfig | None = None,
    dataset_label: str = "",
    model_label: str = "",
) -> PipelineResult:
    """Mask every frame exactly once; score against ground truth when present.

    With seed_frames == len(video) the run degenerates to pure per-frame
    segmentation and the tracker is never touched (it may be None).
    """
    cfg = cfg or PipelineConfig()
    seed_list = cfg.resolve_seeds(len(video))

    seeds: dict[int, Tensor] = {}
    with torch.no_grad():
        for t in seed_list:
            box = _seed_box(video, t, cfg)
            seeds[t] = segmenter.predict_mask(video.frames[t], box)

    if len(seeds) == len(video):
        masks = torch.stack([seeds[t] for t in range(len(video))])
    else:
        if tracker is None:
            raise ConfigError("a tracker is required when seed frames do not cover the video")
        masks = propagate(tracker, video, seeds, cfg.memory)

    report = None
    if video.masks is not None:
        scores = [
            frame_score(masks[t], video.masks[t], frame_index=video.indices[t])
            for t in range(len(video))
        ]
        report = aggregate(scores, dataset=dataset_label or video.seq_id, model=model_label)
    return PipelineResult(masks=masks, report=report, seed_indices=sorted(seeds))


def write_predicted_masks(result: PipelineResult, video: VideoSequence, out_dir: str | Path) -> list[Path]:
    """One PNG per frame, named by the input frame numbering."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, idx in enumerate(video.indices):
        path = out / f"{idx:05d}.png"
        save_mask_png(path, result.masks[t])
        paths.append(path)
    return paths
