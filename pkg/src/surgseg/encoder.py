"""Miniature ViT image encoder with per-projection adapter hooks.

The encoder mirrors the structure of a promptable-segmentation image
backbone (patch embedding, pre-norm transformer blocks with separate
q/k/v/out projections, final layer norm) at a size small enough to train
on a laptop. Every 2-D projection carries a stable dotted name (e.g.
``blocks.0.attn.q``) that low-rank adapters attach to.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional

import torch
from torch import Tensor, nn

from .errors import ConfigError, InputError, NumericError


@dataclass(frozen=True)
class ViTConfig:
    """Shape of the image encoder.

    ``depth=0`` is tolerated as an internal test mode (patch tokens pass
    straight to the final norm); every public entry point uses depth >= 1.
    """

    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 32
    depth: int = 2
    num_heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self) -> None:
        if min(self.image_size, self.patch_size, self.embed_dim, self.num_heads) <= 0:
            raise ConfigError("image_size, patch_size, embed_dim, num_heads must be positive")
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def hidden_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    @classmethod
    def desk(cls) -> "ViTConfig":
        """Default desk-scale config used throughout tests and the CLI."""
        return cls()

    @classmethod
    def vitb(cls) -> "ViTConfig":
        """Base-size preset (embed dim 768, 12 blocks); documented for interop,
        not trained here."""
        return cls(image_size=1024, patch_size=16, embed_dim=768, depth=12, num_heads=12)


def projection_shapes(cfg: ViTConfig) -> dict[str, tuple[int, int]]:
    """Named 2-D projections of the encoder as ``name -> (d_out, d_in)``.

    Pure shape arithmetic; used both for adapter parameter accounting and
    by tests, without instantiating weights.
    """
    shapes: dict[str, tuple[int, int]] = {}
    d, hidden = cfg.embed_dim, cfg.hidden_dim
    for i in range(cfg.depth):
        for proj in ("q", "k", "v", "out"):
            shapes[f"blocks.{i}.attn.{proj}"] = (d, d)
        shapes[f"blocks.{i}.mlp.fc1"] = (hidden, d)
        shapes[f"blocks.{i}.mlp.fc2"] = (d, hidden)
    return shapes


def flatten_patches(image: Tensor, cfg: ViTConfig) -> Tensor:
    """Cut an (H, W, 3) image (or a (B, H, W, 3) batch) into row-major
    patches, each flattened in (row, col, channel) order."""
    squeeze = image.dim() == 3
    if squeeze:
        image = image.unsqueeze(0)
    if image.dim() != 4 or image.shape[-1] != 3:
        raise InputError(f"expected (H, W, 3) or (B, H, W, 3) image, got {tuple(image.shape)}")
    b, h, w, _ = image.shape
    if h != cfg.image_size or w != cfg.image_size:
        raise InputError(
            f"image is {h}x{w}, config expects {cfg.image_size}x{cfg.image_size}"
        )
    g, p = cfg.grid_size, cfg.patch_size
    x = image.reshape(b, g, p, g, p, 3)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, g * g, p * p * 3)
    return x.squeeze(0) if squeeze else x


def scaled_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int) -> tuple[Tensor, Tensor]:
    """Multi-head softmax attention; returns (output, attention weights).

    Weights have shape (..., heads, N_q, N_k) and each row sums to 1.
    """
    *lead, n, d = q.shape
    if d % num_heads != 0:
        raise InputError(f"feature dim {d} not divisible by {num_heads} heads")
    dh = d // num_heads
    nk = k.shape[-2]

    def split(t: Tensor, length: int) -> Tensor:
        return t.reshape(*lead, length, num_heads, dh).transpose(-3, -2)

    qh, kh, vh = split(q, n), split(k, nk), split(v, nk)
    logits = qh @ kh.transpose(-1, -2) / math.sqrt(dh)
    weights = torch.softmax(logits, dim=-1)
    out = (weights @ vh).transpose(-3, -2).reshape(*lead, n, d)
    return out, weights


def _project(
    linear: nn.Linear,
    x: Tensor,
    adapters: Optional[Mapping[str, nn.Module]],
    name: str,
) -> Tensor:
    y = linear(x)
    if adapters is not None and name in adapters:
        y = y + adapters[name](x)
    return y


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(
        self,
        x: Tensor,
        adapters: Optional[Mapping[str, nn.Module]] = None,
        prefix: str = "attn",
    ) -> Tensor:
        q = _project(self.q, x, adapters, f"{prefix}.q")
        k = _project(self.k, x, adapters, f"{prefix}.k")
        v = _project(self.v, x, adapters, f"{prefix}.v")
        y, _ = scaled_attention(q, k, v, self.num_heads)
        return _project(self.out, y, adapters, f"{prefix}.out")


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(
        self,
        x: Tensor,
        adapters: Optional[Mapping[str, nn.Module]] = None,
        prefix: str = "mlp",
    ) -> Tensor:
        h = self.act(_project(self.fc1, x, adapters, f"{prefix}.fc1"))
        return _project(self.fc2, h, adapters, f"{prefix}.fc2")


class Block(nn.Module):
    """Pre-norm transformer block: x + Attn(LN(x)), then + MLP(LN(.))."""

    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.embed_dim)
        self.attn = Attention(cfg.embed_dim, cfg.num_heads)
        self.norm2 = nn.LayerNorm(cfg.embed_dim)
        self.mlp = Mlp(cfg.embed_dim, cfg.hidden_dim)

    def forward(
        self,
        x: Tensor,
        adapters: Optional[Mapping[str, nn.Module]] = None,
        prefix: str = "",
    ) -> Tensor:
        x = x + self.attn(self.norm1(x), adapters, f"{prefix}.attn" if prefix else "attn")
        x = x + self.mlp(self.norm2(x), adapters, f"{prefix}.mlp" if prefix else "mlp")
        return x


class ImageEncoder(nn.Module):
    """Patch embedding + learned absolute positions + transformer blocks.

    ``forward`` returns a spatial embedding grid (g, g, d) for a single
    image or (B, g, g, d) for a batch. ``adapters`` maps projection names
    (see :func:`projection_shapes`) to delta modules applied additively.
    """

    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.cfg = cfg
        p, d = cfg.patch_size, cfg.embed_dim
        self.patch_embed = nn.Linear(3 * p * p, d)
        self.pos_embed = nn.Parameter(torch.randn(cfg.num_patches, d) * 0.02)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d)

    def patchify(self, image: Tensor) -> Tensor:
        """Project flattened patches and add positional embeddings: (N, d)."""
        return self.patch_embed(flatten_patches(image, self.cfg)) + self.pos_embed

    def forward(
        self, image: Tensor, adapters: Optional[Mapping[str, nn.Module]] = None
    ) -> Tensor:
        x = self.patchify(image)
        for i, block in enumerate(self.blocks):
            x = block(x, adapters, f"blocks.{i}")
        x = self.norm(x)
        if not torch.isfinite(x).all():
            raise NumericError("non-finite values in encoder output")
        g, d = self.cfg.grid_size, self.cfg.embed_dim
        if x.dim() == 2:
            return x.reshape(g, g, d)
        return x.reshape(x.shape[0], g, g, d)

    def projections(self) -> dict[str, nn.Linear]:
        """Adapter attachment surface: stable name -> linear module."""
        named: dict[str, nn.Linear] = {}
        for i, block in enumerate(self.blocks):
            attn, mlp = block.attn, block.mlp
            named[f"blocks.{i}.attn.q"] = attn.q
            named[f"blocks.{i}.attn.k"] = attn.k
            named[f"blocks.{i}.attn.v"] = attn.v
            named[f"blocks.{i}.attn.out"] = attn.out
            named[f"blocks.{i}.mlp.fc1"] = mlp.fc1
            named[f"blocks.{i}.mlp.fc2"] = mlp.fc2
        return named


def build_image_encoder(cfg: ViTConfig, seed: int = 0) -> ImageEncoder:
    """Deterministically initialized encoder (same seed, same weights)."""
    torch.manual_seed(seed)
    return ImageEncoder(cfg)
