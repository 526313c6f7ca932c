"""Box-prompted mask prediction: prompt encoder, mask decoder, and the
composite segmenter that ties them to the image encoder.

The decoder runs a small two-way attention stack (prompt tokens over the
embedding grid and back), upsamples the grid to full resolution with
transposed convolutions, and scores each pixel against a mask-token
projection. Binarization is fixed at logit 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .encoder import ImageEncoder, ViTConfig, scaled_attention
from .errors import InputError
from .lora import DEFAULT_TARGETS, LoRAAdapter, inject


@dataclass(frozen=True)
class BoxPrompt:
    """Inclusive pixel-coordinate bounding box, x = column, y = row."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def validate(self, width: int, height: int) -> None:
        ok = (
            0 <= self.x_min <= self.x_max < width
            and 0 <= self.y_min <= self.y_max < height
        )
        if not ok:
            raise InputError(f"box {self} out of bounds for {width}x{height} image")

    @classmethod
    def parse(cls, text: str) -> "BoxPrompt":
        parts = text.split(",")
        if len(parts) != 4:
            raise InputError(f"box must be 'x_min,y_min,x_max,y_max', got {text!r}")
        try:
            x0, y0, x1, y1 = (int(p.strip()) for p in parts)
        except ValueError as exc:
            raise InputError(f"box coordinates must be integers, got {text!r}") from exc
        return cls(x0, y0, x1, y1)

    def to_text(self) -> str:
        return f"{self.x_min},{self.y_min},{self.x_max},{self.y_max}"


def bbox_from_mask(mask: Tensor | np.ndarray) -> BoxPrompt:
    """Tight inclusive bounding box of all true pixels; errors on empty masks."""
    m = np.asarray(mask.detach().cpu() if isinstance(mask, Tensor) else mask, dtype=bool)
    if m.ndim != 2:
        raise InputError(f"mask must be 2-D, got shape {m.shape}")
    ys, xs = np.nonzero(m)
    if ys.size == 0:
        raise InputError("mask has no foreground pixels")
    return BoxPrompt(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def binarize(logits: Tensor) -> Tensor:
    """Logits -> boolean mask; the mask is a pure function of logit signs."""
    return logits > 0


def _sinusoid(t: Tensor, n: int) -> Tensor:
    """Interleaved sin/cos encoding of scalars in [0, 1] into n dims.

    Frequencies pi * 2^k; at t = 0 the pattern is exactly [0, 1, 0, 1, ...].
    """
    pairs = n // 2
    k = torch.arange(pairs, dtype=t.dtype)
    angles = t.unsqueeze(-1) * math.pi * (2.0**k)
    enc = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1)
    enc = enc.reshape(*t.shape, pairs * 2)
    if n % 2:
        extra = torch.sin(t.unsqueeze(-1) * math.pi * (2.0**pairs))
        enc = torch.cat([enc, extra], dim=-1)
    return enc


def corner_encoding(x_norm: Tensor, y_norm: Tensor, dim: int) -> Tensor:
    """Sinusoidal embedding of a normalized 2-D point; x gets the first
    dim//2 channels, y the rest."""
    half = dim // 2
    return torch.cat([_sinusoid(x_norm, half), _sinusoid(y_norm, dim - half)], dim=-1)


class PromptEncoder(nn.Module):
    """Encodes a box's two corners into tokens: sinusoidal position of the
    normalized coordinates plus a learned per-corner type embedding."""

    def __init__(self, embed_dim: int):
        super().__init__()
        self.embed_dim = embed_dim
        self.corner_embed = nn.Parameter(torch.randn(2, embed_dim) * 0.02)

    def forward(self, box: BoxPrompt, image_size: int) -> Tensor:
        box.validate(image_size, image_size)
        corners = torch.tensor(
            [[box.x_min, box.y_min], [box.x_max, box.y_max]], dtype=torch.float32
        )
        norm = corners / image_size
        enc = corner_encoding(norm[:, 0], norm[:, 1], self.embed_dim)
        return enc.to(self.corner_embed.dtype) + self.corner_embed

    def forward_batch(self, boxes: Sequence[BoxPrompt], image_size: int) -> Tensor:
        return torch.stack([self(box, image_size) for box in boxes])


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, q_in: Tensor, k_in: Tensor, v_in: Tensor) -> Tensor:
        y, _ = scaled_attention(self.q(q_in), self.k(k_in), self.v(v_in), self.num_heads)
        return self.out(y)


class TwoWayLayer(nn.Module):
    """Tokens attend to themselves and the grid; the grid attends back."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, num_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.t2i = MultiHeadAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))
        self.norm3 = nn.LayerNorm(dim)
        self.i2t = MultiHeadAttention(dim, num_heads)
        self.norm4 = nn.LayerNorm(dim)

    def forward(self, tokens: Tensor, grid: Tensor) -> tuple[Tensor, Tensor]:
        tokens = self.norm1(tokens + self.self_attn(tokens, tokens, tokens))
        tokens = self.norm2(tokens + self.t2i(tokens, grid, grid))
        tokens = self.norm3(tokens + self.mlp(tokens))
        grid = self.norm4(grid + self.i2t(grid, tokens, tokens))
        return tokens, grid


def _upsample_factors(patch_size: int) -> list[int]:
    factors = []
    p = patch_size
    while p % 2 == 0 and p > 1:
        factors.append(2)
        p //= 2
    if p > 1:
        factors.append(p)
    return factors


class MaskDecoder(nn.Module):
    """Composite embedding + prompt tokens -> full-resolution mask logits."""

    def __init__(self, cfg: ViTConfig, num_heads: int = 4, num_layers: int = 2):
        super().__init__()
        d, g = cfg.embed_dim, cfg.grid_size
        self.cfg = cfg
        self.mask_token = nn.Parameter(torch.randn(1, d) * 0.02)
        self.grid_pos = nn.Parameter(torch.randn(g * g, d) * 0.02)
        self.layers = nn.ModuleList(TwoWayLayer(d, num_heads) for _ in range(num_layers))

        stages: list[nn.Module] = []
        channels = d
        for factor in _upsample_factors(cfg.patch_size):
            next_ch = max(channels // 2, 4)
            if factor == 2:
                stages.append(nn.ConvTranspose2d(channels, next_ch, kernel_size=4, stride=2, padding=1))
            else:
                stages.append(nn.ConvTranspose2d(channels, next_ch, kernel_size=factor, stride=factor))
            stages.append(nn.GELU())
            channels = next_ch
        self.upscale = nn.Sequential(*stages)
        self.refine = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.pixel_dim = channels
        self.token_mlp = nn.Sequential(
            nn.Linear(d, d), nn.GELU(), nn.Linear(d, channels)
        )

    def forward(self, embedding: Tensor, prompt_tokens: Tensor) -> Tensor:
        squeeze = embedding.dim() == 3
        if squeeze:
            embedding = embedding.unsqueeze(0)
            prompt_tokens = prompt_tokens.unsqueeze(0)
        b = embedding.shape[0]
        g, d = self.cfg.grid_size, self.cfg.embed_dim
        if embedding.shape[1:] != (g, g, d):
            raise InputError(
                f"embedding shape {tuple(embedding.shape[1:])} != ({g}, {g}, {d})"
            )
        if prompt_tokens.shape[1:] != (2, d):
            raise InputError(f"expected (2, {d}) prompt tokens, got {tuple(prompt_tokens.shape[1:])}")

        grid = embedding.reshape(b, g * g, d) + self.grid_pos
        tokens = torch.cat([self.mask_token.expand(b, 1, d), prompt_tokens], dim=1)
        for layer in self.layers:
            tokens, grid = layer(tokens, grid)

        pix = grid.transpose(1, 2).reshape(b, d, g, g)
        pix = self.refine(self.upscale(pix))
        weights = self.token_mlp(tokens[:, 0])
        logits = torch.einsum("bchw,bc->bhw", pix, weights)
        return logits.squeeze(0) if squeeze else logits


class Segmenter(nn.Module):
    """Image encoder + prompt encoder + mask decoder with adapter slots.

    Adapters live in a ModuleDict ("/" replaces "." in keys, which
    ModuleDict forbids); ``adapter_map`` restores the dotted names the
    encoder looks up.
    """

    def __init__(self, cfg: ViTConfig, decoder_heads: int = 4, decoder_layers: int = 2):
        super().__init__()
        self.cfg = cfg
        self.encoder = ImageEncoder(cfg)
        self.prompt_encoder = PromptEncoder(cfg.embed_dim)
        self.decoder = MaskDecoder(cfg, num_heads=decoder_heads, num_layers=decoder_layers)
        self.adapters = nn.ModuleDict()

    def adapter_map(self) -> dict[str, LoRAAdapter]:
        return {ad.target: ad for ad in self.adapters.values()}

    def inject_adapters(
        self,
        rank: int,
        alpha: float | None = None,
        targets: Sequence[str] = DEFAULT_TARGETS,
        seed: int = 0,
    ) -> dict[str, LoRAAdapter]:
        new = inject(
            self.encoder.projections(),
            targets=targets,
            rank=rank,
            alpha=alpha,
            seed=seed,
            existing=self.adapter_map(),
        )
        for name, adapter in new.items():
            self.adapters[name.replace(".", "/")] = adapter
        return new

    def encode(self, image: Tensor) -> Tensor:
        return self.encoder(image, self.adapter_map() or None)

    def forward(self, image: Tensor, box: BoxPrompt) -> Tensor:
        embedding = self.encode(image)
        tokens = self.prompt_encoder(box, self.cfg.image_size)
        return self.decoder(embedding, tokens)

    def forward_batch(self, images: Tensor, boxes: Sequence[BoxPrompt]) -> Tensor:
        if images.shape[0] != len(boxes):
            raise InputError(f"{images.shape[0]} images but {len(boxes)} boxes")
        embedding = self.encode(images)
        tokens = self.prompt_encoder.forward_batch(boxes, self.cfg.image_size)
        return self.decoder(embedding, tokens)

    @torch.no_grad()
    def predict_mask(self, image: Tensor, box: BoxPrompt) -> Tensor:
        return binarize(self(image, box))


def build_segmenter(
    cfg: Optional[ViTConfig] = None,
    seed: int = 0,
    decoder_heads: int = 4,
    decoder_layers: int = 2,
) -> Segmenter:
    """Deterministically initialized segmenter (same seed, same weights)."""
    torch.manual_seed(seed)
    return Segmenter(cfg or ViTConfig.desk(), decoder_heads, decoder_layers)
