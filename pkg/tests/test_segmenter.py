from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from surgseg.encoder import ViTConfig
from surgseg.errors import InputError
from surgseg.segmenter import (
    BoxPrompt,
    MaskDecoder,
    PromptEncoder,
    bbox_from_mask,
    binarize,
    build_segmenter,
    corner_encoding,
)


def test_corner_at_origin_gives_sin_zero_cos_one_pattern():
    torch.manual_seed(0)
    pe = PromptEncoder(embed_dim=32)
    with torch.no_grad():
        pe.corner_embed.zero_()
    tokens = pe(BoxPrompt(0, 0, 10, 10), image_size=64)
    origin = tokens[0]
    assert torch.allclose(origin[0::2], torch.zeros(16))
    assert torch.allclose(origin[1::2], torch.ones(16))


def test_full_image_box_normalization_hand_sinusoid():
    torch.manual_seed(0)
    pe = PromptEncoder(embed_dim=8)
    with torch.no_grad():
        pe.corner_embed.zero_()
    tokens = pe(BoxPrompt(0, 0, 63, 63), image_size=64)
    t = 63.0 / 64.0
    expected_x = [math.sin(math.pi * t), math.cos(math.pi * t),
                  math.sin(2 * math.pi * t), math.cos(2 * math.pi * t)]
    assert torch.allclose(tokens[1][:4], torch.tensor(expected_x), atol=1e-6)
    # y half uses the same frequencies on y/H
    assert torch.allclose(tokens[1][4:], torch.tensor(expected_x), atol=1e-6)


def test_distinct_boxes_give_distinct_token_pairs():
    torch.manual_seed(1)
    pe = PromptEncoder(embed_dim=32)
    rng = np.random.default_rng(7)
    boxes = set()
    while len(boxes) < 100:
        x0, y0 = rng.integers(0, 60, size=2)
        x1 = rng.integers(x0, 64)
        y1 = rng.integers(y0, 64)
        boxes.add((int(x0), int(y0), int(x1), int(y1)))
    with torch.no_grad():
        encodings = [pe(BoxPrompt(*b), 64).flatten() for b in sorted(boxes)]
    stacked = torch.stack(encodings)
    dists = torch.cdist(stacked, stacked)
    dists.fill_diagonal_(float("inf"))
    assert float(dists.min()) > 0.0


def test_out_of_bounds_boxes_rejected():
    pe = PromptEncoder(embed_dim=16)
    for bad in [(-1, 0, 5, 5), (0, 0, 64, 5), (5, 5, 4, 6), (0, 0, 5, 64)]:
        with pytest.raises(InputError):
            pe(BoxPrompt(*bad), image_size=64)


def test_box_text_parse_and_roundtrip():
    box = BoxPrompt.parse(" 3, 4, 10, 12 ")
    assert box == BoxPrompt(3, 4, 10, 12)
    assert BoxPrompt.parse(box.to_text()) == box
    with pytest.raises(InputError):
        BoxPrompt.parse("1,2,3")
    with pytest.raises(InputError):
        BoxPrompt.parse("a,b,c,d")


def test_bbox_from_mask_examples():
    m = torch.zeros(64, 64, dtype=torch.bool)
    m[7, 5] = True
    assert bbox_from_mask(m) == BoxPrompt(5, 7, 5, 7)

    m = torch.zeros(16, 16, dtype=torch.bool)
    m[3, 2] = True
    m[4, 9] = True
    assert bbox_from_mask(m) == BoxPrompt(2, 3, 9, 4)

    assert bbox_from_mask(torch.ones(64, 64, dtype=torch.bool)) == BoxPrompt(0, 0, 63, 63)

    with pytest.raises(InputError):
        bbox_from_mask(torch.zeros(8, 8, dtype=torch.bool))


def test_bbox_is_tight_on_random_masks():
    rng = np.random.default_rng(3)
    for _ in range(50):
        mask = rng.random((20, 24)) < 0.08
        if not mask.any():
            continue
        box = bbox_from_mask(mask)
        ys, xs = np.nonzero(mask)
        assert (box.x_min, box.y_min, box.x_max, box.y_max) == (
            xs.min(), ys.min(), xs.max(), ys.max()
        )


def test_zeroed_decoder_gives_all_zero_logits_and_empty_mask():
    cfg = ViTConfig()
    torch.manual_seed(0)
    decoder = MaskDecoder(cfg)
    with torch.no_grad():
        for p in decoder.parameters():
            p.zero_()
    logits = decoder(torch.randn(8, 8, 32), torch.randn(2, 32))
    assert torch.equal(logits, torch.zeros(64, 64))
    assert not binarize(logits).any()


def test_decoder_deterministic_and_full_resolution():
    seg = build_segmenter(seed=4)
    image = torch.rand(64, 64, 3, generator=torch.Generator().manual_seed(5))
    box = BoxPrompt(10, 12, 40, 30)
    first = seg(image, box)
    second = seg(image, box)
    assert first.shape == (64, 64)
    assert torch.equal(first, second)


def test_decoder_batch_matches_single():
    seg = build_segmenter(seed=4)
    gen = torch.Generator().manual_seed(6)
    images = torch.rand(3, 64, 64, 3, generator=gen)
    boxes = [BoxPrompt(1, 2, 30, 40), BoxPrompt(5, 5, 20, 20), BoxPrompt(0, 0, 63, 63)]
    batched = seg.forward_batch(images, boxes)
    assert batched.shape == (3, 64, 64)
    for i in range(3):
        assert torch.allclose(batched[i], seg(images[i], boxes[i]), atol=1e-6)


def test_mask_is_pure_function_of_logit_signs():
    gen = torch.Generator().manual_seed(8)
    logits = torch.randn(16, 16, generator=gen)
    mask = binarize(logits)
    assert torch.equal(mask, logits > 0)
    flipped = logits.clone()
    flipped[3, 4] = -flipped[3, 4]
    diff = binarize(flipped) ^ mask
    expected_change = logits[3, 4] != 0
    assert diff[3, 4] == expected_change
    diff[3, 4] = False
    assert not diff.any()


def test_decoder_rejects_wrong_shapes():
    decoder = MaskDecoder(ViTConfig())
    with pytest.raises(InputError):
        decoder(torch.randn(4, 4, 32), torch.randn(2, 32))
    with pytest.raises(InputError):
        decoder(torch.randn(8, 8, 32), torch.randn(3, 32))


def test_corner_encoding_splits_dims_between_axes():
    enc = corner_encoding(torch.tensor(0.25), torch.tensor(0.0), dim=8)
    assert enc.shape == (8,)
    # y = 0 half must be the sin0/cos1 pattern regardless of x
    assert torch.allclose(enc[4::2], torch.zeros(2))
    assert torch.allclose(enc[5::2], torch.ones(2))
