"""Memory-based mask propagation through a video.

Seed frames (mask given) are encoded into a permanent key-value store
that is never evicted; every ``insert_period`` frames the tracker's own
prediction is pushed into a bounded FIFO working store. A new frame is
segmented by scaled dot-product attention of its query keys over all
memory keys (optionally top-k filtered), blending the stored values into
a readout that a small decoder, with skip connections from the frame
features, turns back into a mask.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .checkpoint import FORMAT_VERSION, archive_sha256, load_archive, save_archive
from .data import VideoSequence
from .errors import ConfigError, DataError, InputError
from .training import seg_loss


@dataclass(frozen=True)
class TrackerConfig:
    frame_size: int = 64
    key_dim: int = 32
    value_dim: int = 32
    base_channels: int = 16

    def __post_init__(self) -> None:
        if min(self.frame_size, self.key_dim, self.value_dim, self.base_channels) <= 0:
            raise ConfigError("tracker dims must be positive")
        if self.frame_size % 8 != 0:
            raise ConfigError("frame_size must be divisible by 8 (three stride-2 stages)")

    @property
    def grid_size(self) -> int:
        return self.frame_size // 8


@dataclass(frozen=True)
class MemoryConfig:
    """Bank knobs: working-memory capacity, insertion period in frames,
    and top-k affinity filtering (None = disabled)."""

    capacity: int = 16
    insert_period: int = 5
    top_k: int | None = 32

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ConfigError("working-memory capacity must be >= 1")
        if self.insert_period < 1:
            raise ConfigError("insert_period must be >= 1")
        if self.top_k is not None and self.top_k < 1:
            raise ConfigError("top_k must be >= 1 or None")


@dataclass
class MemoryEntry:
    key: Tensor  # (R, d_k)
    value: Tensor  # (R, d_v)
    source: str  # "permanent" | "working"
    frame_index: int

    def __post_init__(self) -> None:
        if self.key.shape[0] != self.value.shape[0]:
            raise InputError("key and value row counts differ")


class MemoryBank:
    """Permanent entries live forever; working entries are FIFO-bounded."""

    def __init__(self, cfg: MemoryConfig | None = None):
        self.cfg = cfg or MemoryConfig()
        self.permanent: list[MemoryEntry] = []
        self.working: list[MemoryEntry] = []

    def add_permanent(self, key: Tensor, value: Tensor, frame_index: int) -> None:
        self.permanent.append(MemoryEntry(key, value, "permanent", frame_index))

    def update(self, key: Tensor, value: Tensor, frame_index: int) -> bool:
        """Insert into working memory on period frames; evict FIFO beyond
        capacity. Returns whether an insertion happened."""
        if frame_index % self.cfg.insert_period != 0:
            return False
        self.working.append(MemoryEntry(key, value, "working", frame_index))
        while len(self.working) > self.cfg.capacity:
            self.working.pop(0)
        return True

    def entries(self) -> list[MemoryEntry]:
        return self.permanent + self.working

    @property
    def is_empty(self) -> bool:
        return not self.permanent and not self.working

    def num_rows(self) -> int:
        return sum(e.key.shape[0] for e in self.entries())


def memory_read(query_key: Tensor, bank: MemoryBank, top_k: int | None = None) -> Tensor:
    """Softmax attention readout of the bank for each query row.

    affinity[i, j] = (q_i . k_j) / sqrt(d_k); optionally only the top_k
    affinities per query row survive (others -> -inf) before the softmax.
    """
    if bank.is_empty:
        raise DataError("memory bank is empty, nothing to read")
    entries = bank.entries()
    keys = torch.cat([e.key for e in entries], dim=0)
    values = torch.cat([e.value for e in entries], dim=0)
    if query_key.shape[1] != keys.shape[1]:
        raise InputError(f"query key dim {query_key.shape[1]} != memory key dim {keys.shape[1]}")
    affinity = (query_key @ keys.T) / math.sqrt(query_key.shape[1])
    m = keys.shape[0]
    if top_k is not None and top_k < m:
        kth = torch.topk(affinity, top_k, dim=1).values[:, -1:]
        affinity = torch.where(affinity >= kth, affinity, torch.full_like(affinity, -torch.inf))
    weights = torch.softmax(affinity, dim=1)
    return weights @ values


def _conv(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1)


class KeyEncoder(nn.Module):
    """Three stride-2 stages; returns keys at 1/8 resolution plus the
    intermediate features used as decoder skips."""

    def __init__(self, cfg: TrackerConfig):
        super().__init__()
        c = cfg.base_channels
        self.stage1 = _conv(3, c, stride=2)
        self.stage2 = _conv(c, 2 * c, stride=2)
        self.stage3 = _conv(2 * c, 2 * c, stride=2)
        self.key_head = nn.Conv2d(2 * c, cfg.key_dim, kernel_size=1)
        self.act = nn.GELU()

    def forward(self, frames: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        x = frames.permute(0, 3, 1, 2)
        f2 = self.act(self.stage1(x))
        f4 = self.act(self.stage2(f2))
        f8 = self.act(self.stage3(f4))
        return self.key_head(f8), f4, f2


class ValueEncoder(nn.Module):
    """Mask-conditioned features: the mask enters as a fourth channel."""

    def __init__(self, cfg: TrackerConfig):
        super().__init__()
        c = cfg.base_channels
        self.stage1 = _conv(4, c, stride=2)
        self.stage2 = _conv(c, 2 * c, stride=2)
        self.stage3 = _conv(2 * c, 2 * c, stride=2)
        self.value_head = nn.Conv2d(2 * c, cfg.value_dim, kernel_size=1)
        self.act = nn.GELU()

    def forward(self, frames: Tensor, masks: Tensor) -> Tensor:
        x = torch.cat([frames, masks.to(frames.dtype).unsqueeze(-1)], dim=-1)
        x = x.permute(0, 3, 1, 2)
        x = self.act(self.stage1(x))
        x = self.act(self.stage2(x))
        x = self.act(self.stage3(x))
        return self.value_head(x)


class ReadoutDecoder(nn.Module):
    """Readout grid + frame skips -> full-resolution mask logits."""

    def __init__(self, cfg: TrackerConfig):
        super().__init__()
        c = cfg.base_channels
        self.fuse8 = _conv(cfg.value_dim, 2 * c)
        self.up1 = nn.ConvTranspose2d(2 * c, c, kernel_size=4, stride=2, padding=1)
        self.fuse4 = _conv(c + 2 * c, c)
        self.up2 = nn.ConvTranspose2d(c, c, kernel_size=4, stride=2, padding=1)
        self.fuse2 = _conv(c + c, c)
        self.up3 = nn.ConvTranspose2d(c, c // 2, kernel_size=4, stride=2, padding=1)
        self.out = _conv(c // 2, 1)
        self.act = nn.GELU()

    def forward(self, readout: Tensor, f4: Tensor, f2: Tensor) -> Tensor:
        x = self.act(self.fuse8(readout))
        x = self.act(self.fuse4(torch.cat([self.up1(x), f4], dim=1)))
        x = self.act(self.fuse2(torch.cat([self.up2(x), f2], dim=1)))
        x = self.act(self.up3(x))
        return self.out(x).squeeze(1)


class Tracker(nn.Module):
    def __init__(self, cfg: TrackerConfig | None = None):
        super().__init__()
        self.cfg = cfg or TrackerConfig()
        self.key_encoder = KeyEncoder(self.cfg)
        self.value_encoder = ValueEncoder(self.cfg)
        self.decoder = ReadoutDecoder(self.cfg)

    def _check_frame(self, frame: Tensor) -> None:
        if frame.shape != (self.cfg.frame_size, self.cfg.frame_size, 3):
            raise InputError(
                f"frame shape {tuple(frame.shape)} != "
                f"({self.cfg.frame_size}, {self.cfg.frame_size}, 3)"
            )

    def compute_key(self, frame: Tensor) -> Tensor:
        """Query/memory keys of a frame, flattened spatially: (g*g, d_k)."""
        self._check_frame(frame)
        key, _, _ = self.key_encoder(frame.unsqueeze(0))
        return key.flatten(2).squeeze(0).T

    def compute_value(self, frame: Tensor, mask: Tensor) -> Tensor:
        """Mask-conditioned value features, flattened spatially: (g*g, d_v)."""
        self._check_frame(frame)
        if mask.shape != frame.shape[:2]:
            raise InputError(f"mask shape {tuple(mask.shape)} != frame {tuple(frame.shape[:2])}")
        value = self.value_encoder(frame.unsqueeze(0), mask.unsqueeze(0))
        return value.flatten(2).squeeze(0).T

    def segment(self, frame: Tensor, bank: MemoryBank, top_k: int | None = None) -> Tensor:
        """Mask logits for a frame given the current memory bank."""
        self._check_frame(frame)
        key, f4, f2 = self.key_encoder(frame.unsqueeze(0))
        g = self.cfg.grid_size
        query = key.flatten(2).squeeze(0).T
        readout = memory_read(query, bank, top_k)
        grid = readout.T.reshape(1, self.cfg.value_dim, g, g)
        return self.decoder(grid, f4, f2).squeeze(0)


def update_memory(
    bank: MemoryBank, tracker: Tracker, frame: Tensor, mask: Tensor, frame_index: int
) -> bool:
    """Push a predicted frame into working memory when the period hits."""
    if frame_index % bank.cfg.insert_period != 0:
        return False
    key = tracker.compute_key(frame)
    value = tracker.compute_value(frame, mask)
    return bank.update(key, value, frame_index)


def build_seed_bank(
    tracker: Tracker,
    video: VideoSequence,
    seeds: Mapping[int, Tensor],
    mem: MemoryConfig | None = None,
) -> MemoryBank:
    """Permanent memory holding every seed frame's key/value pair."""
    if not seeds:
        raise ConfigError("at least one seed frame is required")
    bank = MemoryBank(mem or MemoryConfig())
    for idx in sorted(seeds):
        if not 0 <= idx < len(video):
            raise ConfigError(f"seed index {idx} outside sequence of {len(video)} frames")
        mask = seeds[idx]
        key = tracker.compute_key(video.frames[idx])
        value = tracker.compute_value(video.frames[idx], mask)
        bank.add_permanent(key, value, idx)
    return bank


@torch.no_grad()
def propagate(
    tracker: Tracker,
    video: VideoSequence,
    seeds: Mapping[int, Tensor],
    mem: MemoryConfig | None = None,
) -> Tensor:
    """Seed-conditioned masks for every frame, in temporal order.

    Seed frames return their seed masks unchanged; every other frame is
    decoded from the memory readout, and its prediction feeds the working
    memory. Frame t's mask depends only on frames <= t and the seeds.
    """
    mem = mem or MemoryConfig()
    bank = build_seed_bank(tracker, video, seeds, mem)
    out = torch.zeros((len(video), video.frame_size, video.frame_size), dtype=torch.bool)
    for t in range(len(video)):
        if t in seeds:
            out[t] = seeds[t].to(torch.bool)
            continue
        logits = tracker.segment(video.frames[t], bank, mem.top_k)
        mask = logits > 0
        out[t] = mask
        update_memory(bank, tracker, video.frames[t], mask, t)
    return out


@dataclass
class TrackerTrainRecord:
    losses: list[float] = field(default_factory=list)
    wall_time_s: float = 0.0
    checkpoint_sha256: str | None = None


def train_tracker(
    tracker: Tracker,
    seqs: Sequence[VideoSequence],
    steps: int = 2000,
    learning_rate: float = 1e-3,
    seed: int = 0,
    mem: MemoryConfig | None = None,
    log_dir: str | Path | None = None,
) -> TrackerTrainRecord:
    """Train on (memory frames -> query frame) samples drawn from ground
    truth, with the same composite loss the segmenter uses."""
    if not seqs:
        raise DataError("no training sequences")
    for seq in seqs:
        if seq.masks is None:
            raise DataError(f"sequence '{seq.seq_id}' has no ground-truth masks")
    mem = mem or MemoryConfig()
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(tracker.parameters(), lr=learning_rate)
    record = TrackerTrainRecord()
    start = time.perf_counter()

    for _ in range(steps):
        seq = seqs[int(rng.integers(len(seqs)))]
        n_mem = 1 if len(seq) < 3 else 1 + int(rng.random() < 0.5)
        picks = rng.choice(len(seq), size=n_mem + 1, replace=False)
        bank = MemoryBank(mem)
        for idx in picks[:-1]:
            idx = int(idx)
            bank.add_permanent(
                tracker.compute_key(seq.frames[idx]),
                tracker.compute_value(seq.frames[idx], seq.masks[idx]),
                idx,
            )
        q = int(picks[-1])
        logits = tracker.segment(seq.frames[q], bank, mem.top_k)
        loss = seg_loss(logits, seq.masks[q])
        opt.zero_grad()
        loss.backward()
        opt.step()
        record.losses.append(float(loss.detach()))

    record.wall_time_s = time.perf_counter() - start
    record.checkpoint_sha256 = archive_sha256(*_tracker_archive(tracker))

    if log_dir is not None:
        from .figures import save_loss_curve

        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        stride = max(len(record.losses) // 200, 1)
        save_loss_curve(
            list(range(0, len(record.losses), stride)),
            record.losses[::stride],
            [None] * len(record.losses[::stride]),
            log_dir / "tracker_loss_curve.png",
        )
    return record


def _tracker_archive(tracker: Tracker) -> tuple[dict, dict]:
    arrays = {
        name: p.detach().cpu().numpy().astype(np.float32)
        for name, p in tracker.named_parameters()
    }
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "tracker",
        "tracker": {
            "frame_size": tracker.cfg.frame_size,
            "key_dim": tracker.cfg.key_dim,
            "value_dim": tracker.cfg.value_dim,
            "base_channels": tracker.cfg.base_channels,
        },
    }
    return arrays, header


def save_tracker(path: str | Path, tracker: Tracker) -> str:
    arrays, header = _tracker_archive(tracker)
    save_archive(path, arrays, header)
    return archive_sha256(arrays, header)


def load_tracker(path: str | Path) -> Tracker:
    arrays, header = load_archive(path)
    if header.get("kind") != "tracker":
        raise DataError(f"expected a tracker checkpoint, got kind={header.get('kind')!r}")
    tracker = Tracker(TrackerConfig(**header["tracker"]))
    with torch.no_grad():
        for name, param in tracker.named_parameters():
            if name not in arrays:
                raise DataError(f"checkpoint missing parameter '{name}'")
            param.copy_(torch.from_numpy(arrays[name]))
    return tracker


def build_tracker(cfg: TrackerConfig | None = None, seed: int = 0) -> Tracker:
    """Deterministically initialized tracker (same seed, same weights)."""
    torch.manual_seed(seed)
    return Tracker(cfg or TrackerConfig())
