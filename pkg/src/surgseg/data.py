"""Dataset handling: frame/mask directory ingestion and synthetic videos.

Directory contract (one sequence)::

    <root>/<seq>/images/00000.png   RGB frames
    <root>/<seq>/masks/00000.png    single-channel masks, 0 = background

Any nonzero mask pixel loads as foreground. Frames within a sequence are
ordered by the numeric index embedded in the filename, never by directory
listing order. An optional ``manifest.json`` at the root pins the split,
the sequence list and the file patterns.

The synthetic generator renders bright elongated "instrument" capsules
moving and rotating over a darker drifting tissue-like background, with a
dark occluder blob that sometimes crosses them. Ground truth is the exact
visible instrument footprint. Frames are quantized to 8 bits at
generation time so a write/reload round trip is exact.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .errors import ConfigError, DataError

MIN_VISIBLE_PIXELS = 40


@dataclass
class VideoSequence:
    """Ordered frames with optional aligned ground-truth masks.

    ``frame_indices`` preserves the numeric indices found in the source
    filenames so outputs can mirror the input numbering; it defaults to
    0..T-1 for generated sequences.
    """

    seq_id: str
    frames: Tensor  # (T, H, W, 3) float32 in [0, 1]
    masks: Tensor | None = None  # (T, H, W) bool
    frame_indices: list[int] | None = None

    def __post_init__(self) -> None:
        if self.frames.dim() != 4 or self.frames.shape[-1] != 3:
            raise DataError(f"frames must be (T, H, W, 3), got {tuple(self.frames.shape)}")
        if self.masks is not None and self.masks.shape != self.frames.shape[:3]:
            raise DataError(
                f"masks {tuple(self.masks.shape)} do not align with frames "
                f"{tuple(self.frames.shape[:3])}"
            )
        if self.frame_indices is not None and len(self.frame_indices) != self.frames.shape[0]:
            raise DataError("frame_indices do not align with frames")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_size(self) -> int:
        return self.frames.shape[1]

    @property
    def indices(self) -> list[int]:
        return self.frame_indices or list(range(len(self)))


@dataclass
class DatasetManifest:
    """Maps a directory layout onto the loader contract."""

    root: Path
    split: str = ""
    sequences: list[str] = field(default_factory=list)
    frame_pattern: str = "images/*.png"
    mask_pattern: str = "masks/*.png"

    def save(self, path: str | Path | None = None) -> Path:
        path = Path(path) if path else Path(self.root) / "manifest.json"
        payload = {
            "version": 1,
            "split": self.split,
            "sequences": self.sequences,
            "frame_pattern": self.frame_pattern,
            "mask_pattern": self.mask_pattern,
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        data = json.loads(path.read_text())
        return cls(
            root=path.parent,
            split=data.get("split", ""),
            sequences=list(data.get("sequences", [])),
            frame_pattern=data.get("frame_pattern", "images/*.png"),
            mask_pattern=data.get("mask_pattern", "masks/*.png"),
        )


def _numeric_index(path: Path) -> int:
    digits = re.sub(r"\D", "", path.stem)
    if not digits:
        raise DataError(f"cannot extract a frame index from '{path.name}'")
    return int(digits)


def save_frame_png(path: Path, frame: Tensor) -> None:
    arr = np.clip(frame.numpy() * 255.0 + 0.5, 0, 255).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path)


def save_mask_png(path: Path, mask: Tensor) -> None:
    arr = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path)


def load_frame_png(path: Path) -> Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr)


def load_mask_png(path: Path) -> Tensor:
    arr = np.asarray(Image.open(path).convert("L"))
    return torch.from_numpy(arr > 0)


def write_sequence(seq: VideoSequence, root: str | Path) -> Path:
    """Write one sequence in the directory contract; returns its directory."""
    seq_dir = Path(root) / seq.seq_id
    for t in range(len(seq)):
        save_frame_png(seq_dir / "images" / f"{t:05d}.png", seq.frames[t])
        if seq.masks is not None:
            save_mask_png(seq_dir / "masks" / f"{t:05d}.png", seq.masks[t])
    return seq_dir


def load_sequence(seq_dir: str | Path, require_masks: bool = True,
                  frame_pattern: str = "images/*.png",
                  mask_pattern: str = "masks/*.png") -> VideoSequence:
    seq_dir = Path(seq_dir)
    frame_paths = sorted(seq_dir.glob(frame_pattern), key=_numeric_index)
    if not frame_paths:
        raise DataError(f"no frames match '{frame_pattern}' under {seq_dir}")
    mask_paths = {_numeric_index(p): p for p in seq_dir.glob(mask_pattern)}

    frames, masks, indices = [], [], []
    for p in frame_paths:
        idx = _numeric_index(p)
        indices.append(idx)
        frames.append(load_frame_png(p))
        mask_path = mask_paths.get(idx)
        if mask_path is None:
            if require_masks or mask_paths:
                raise DataError(f"mask missing for frame {idx} of '{seq_dir.name}'")
        else:
            masks.append((idx, load_mask_png(mask_path)))

    frame_tensor = torch.stack(frames)
    mask_tensor = None
    if masks:
        if len(masks) != len(frames):
            raise DataError(f"sequence '{seq_dir.name}' has {len(frames)} frames "
                            f"but {len(masks)} masks")
        mask_tensor = torch.stack([m for _, m in masks])
        if mask_tensor.shape[1:] != frame_tensor.shape[1:3]:
            raise DataError(
                f"mask size {tuple(mask_tensor.shape[1:])} != frame size "
                f"{tuple(frame_tensor.shape[1:3])} in '{seq_dir.name}'"
            )
    return VideoSequence(
        seq_id=seq_dir.name, frames=frame_tensor, masks=mask_tensor, frame_indices=indices
    )


def load_dataset(root: str | Path, require_masks: bool = True) -> list[VideoSequence]:
    """Load every sequence under ``root`` (or ``root`` itself if it is a
    single sequence directory), honoring ``manifest.json`` when present."""
    root = Path(root)
    if not root.exists():
        raise DataError(f"dataset root not found: {root}")
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        manifest = DatasetManifest.load(manifest_path)
        seqs = []
        for name in manifest.sequences:
            seq_dir = root / name
            if not seq_dir.is_dir():
                raise DataError(f"manifest names missing sequence directory: {seq_dir}")
            seqs.append(load_sequence(seq_dir, require_masks,
                                      manifest.frame_pattern, manifest.mask_pattern))
        return seqs
    if (root / "images").is_dir():
        return [load_sequence(root, require_masks)]
    seq_dirs = sorted(d for d in root.iterdir() if d.is_dir() and (d / "images").is_dir())
    if not seq_dirs:
        raise DataError(f"no sequence directories under {root}")
    return [load_sequence(d, require_masks) for d in seq_dirs]


def frame_pairs(seqs: Sequence[VideoSequence]) -> list[tuple[Tensor, Tensor]]:
    """Flatten sequences into (frame, mask) training pairs, skipping frames
    whose ground truth is empty (no box prompt can be derived)."""
    pairs = []
    for seq in seqs:
        if seq.masks is None:
            raise DataError(f"sequence '{seq.seq_id}' has no ground-truth masks")
        for t in range(len(seq)):
            if bool(seq.masks[t].any()):
                pairs.append((seq.frames[t], seq.masks[t]))
    if not pairs:
        raise DataError("no frames with non-empty ground truth")
    return pairs


@dataclass(frozen=True)
class MotionSpec:
    """Knobs of the synthetic generator; ranges are sampled per sequence."""

    num_instruments: int = 1
    speed: tuple[float, float] = (0.4, 1.0)
    turn_rate: tuple[float, float] = (0.01, 0.035)
    half_length: tuple[float, float] = (10.0, 17.0)
    radius: tuple[float, float] = (3.0, 5.0)
    occluder: bool = True
    background_drift: float = 0.35

    def __post_init__(self) -> None:
        if not 1 <= self.num_instruments <= 2:
            raise ConfigError("num_instruments must be 1 or 2")


def _fold(value: np.ndarray | float, lo: float, hi: float) -> np.ndarray | float:
    """Reflect a coordinate into [lo, hi] (triangle wave)."""
    period = 2.0 * (hi - lo)
    y = np.mod(value - lo, period)
    return lo + np.minimum(y, period - y)


def _coarse_field(rng: np.random.Generator, cells: int) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=(cells, cells))


def _sample_field(field: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Bilinear sample of a coarse field at fractional (wrapping) coordinates."""
    cells = field.shape[0]
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy, fx = ys - y0, xs - x0
    y0m, x0m = y0 % cells, x0 % cells
    y1m, x1m = (y0 + 1) % cells, (x0 + 1) % cells
    top = field[y0m, x0m] * (1 - fx) + field[y0m, x1m] * fx
    bot = field[y1m, x0m] * (1 - fx) + field[y1m, x1m] * fx
    return top * (1 - fy) + bot * fy


def synth_video(
    seed: int,
    n_frames: int = 60,
    size: int = 64,
    motion: MotionSpec | None = None,
    seq_id: str | None = None,
) -> VideoSequence:
    """Render a deterministic synthetic surgical-like sequence with exact
    ground truth. Same seed, same bytes."""
    if n_frames < 1:
        raise ConfigError("n_frames must be >= 1")
    spec = motion or MotionSpec()
    rng = np.random.default_rng(seed)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    margin = size / 4.0

    bg_field = _coarse_field(rng, max(size // 8, 4))
    bg_phase = rng.uniform(0, 100.0, size=2)
    bg_dir = rng.uniform(0, 2 * np.pi)

    instruments = []
    for _ in range(spec.num_instruments):
        instruments.append({
            "c0": rng.uniform(margin, size - margin, size=2),
            "heading": rng.uniform(0, 2 * np.pi),
            "speed": rng.uniform(*spec.speed),
            "theta0": rng.uniform(0, 2 * np.pi),
            "turn": rng.uniform(*spec.turn_rate) * rng.choice([-1.0, 1.0]),
            "half_len": rng.uniform(*spec.half_length),
            "radius": rng.uniform(*spec.radius),
            "tint": rng.uniform(0.92, 0.99, size=3),
        })

    occ = None
    if spec.occluder:
        occ = {
            "c0": rng.uniform(0, size, size=2),
            "heading": rng.uniform(0, 2 * np.pi),
            "speed": rng.uniform(0.5, 1.2),
            "ax": rng.uniform(7.0, 12.0),
            "ay": rng.uniform(5.0, 9.0),
            "angle": rng.uniform(0, np.pi),
            "shade": rng.uniform(0.18, 0.30),
        }

    frames = np.empty((n_frames, size, size, 3), dtype=np.float32)
    masks = np.zeros((n_frames, size, size), dtype=bool)

    for t in range(n_frames):
        drift = spec.background_drift * t
        ys = (yy + bg_phase[0] + drift * np.sin(bg_dir)) / 8.0
        xs = (xx + bg_phase[1] + drift * np.cos(bg_dir)) / 8.0
        field = _sample_field(bg_field, ys, xs)
        img = np.empty((size, size, 3), dtype=np.float64)
        img[..., 0] = 0.30 + 0.28 * field
        img[..., 1] = 0.10 + 0.16 * field
        img[..., 2] = 0.12 + 0.14 * field

        footprint = np.zeros((size, size), dtype=bool)
        for ins in instruments:
            cx = _fold(ins["c0"][0] + ins["speed"] * np.cos(ins["heading"]) * t, margin, size - margin)
            cy = _fold(ins["c0"][1] + ins["speed"] * np.sin(ins["heading"]) * t, margin, size - margin)
            theta = ins["theta0"] + ins["turn"] * t
            ux, uy = np.cos(theta), np.sin(theta)
            dx, dy = xx - cx, yy - cy
            along = np.clip(dx * ux + dy * uy, -ins["half_len"], ins["half_len"])
            px, py = dx - along * ux, dy - along * uy
            dist2 = px * px + py * py
            inside = dist2 <= ins["radius"] ** 2
            shade = 0.72 + 0.22 * np.clip(1.0 - dist2 / ins["radius"] ** 2, 0.0, 1.0)
            for c in range(3):
                img[..., c] = np.where(inside, shade * ins["tint"][c], img[..., c])
            footprint |= inside

        visible = footprint
        if occ is not None:
            ocx = _fold(occ["c0"][0] + occ["speed"] * np.cos(occ["heading"]) * t, 0, size)
            ocy = _fold(occ["c0"][1] + occ["speed"] * np.sin(occ["heading"]) * t, 0, size)
            ca, sa = np.cos(occ["angle"]), np.sin(occ["angle"])
            rx = (xx - ocx) * ca + (yy - ocy) * sa
            ry = -(xx - ocx) * sa + (yy - ocy) * ca
            blob = (rx / occ["ax"]) ** 2 + (ry / occ["ay"]) ** 2 <= 1.0
            if np.count_nonzero(footprint & ~blob) >= MIN_VISIBLE_PIXELS:
                img[..., 0] = np.where(blob, occ["shade"] + 0.05 * field, img[..., 0])
                img[..., 1] = np.where(blob, 0.06 + 0.03 * field, img[..., 1])
                img[..., 2] = np.where(blob, 0.07 + 0.03 * field, img[..., 2])
                visible = footprint & ~blob

        quantized = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5)
        frames[t] = (quantized / 255.0).astype(np.float32)
        masks[t] = visible

    return VideoSequence(
        seq_id=seq_id or f"synth_{seed:04d}",
        frames=torch.from_numpy(frames),
        masks=torch.from_numpy(masks),
    )


def synth_dataset(
    seed: int,
    num_sequences: int,
    n_frames: int = 60,
    size: int = 64,
    motion: MotionSpec | None = None,
) -> list[VideoSequence]:
    """A family of sequences with per-sequence seeds ``seed + i``."""
    return [
        synth_video(seed + i, n_frames, size, motion, seq_id=f"seq_{i:03d}")
        for i in range(num_sequences)
    ]
