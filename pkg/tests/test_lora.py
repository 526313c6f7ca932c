from __future__ import annotations

import numpy as np
import pytest
import torch

from surgseg.encoder import ViTConfig, build_image_encoder
from surgseg.errors import ConfigError
from surgseg.lora import (
    FreezePolicy,
    LoRAAdapter,
    ParamCounts,
    adapted_forward,
    count_adapter_params,
    inject,
    lora_param_count,
    merge,
    pattern_matches,
    trainable_count,
)
from surgseg.segmenter import build_segmenter


def make_adapter(a, b, alpha=None, target="t"):
    a = torch.as_tensor(a, dtype=torch.float32)
    b = torch.as_tensor(b, dtype=torch.float32)
    adapter = LoRAAdapter(target, d_in=a.shape[1], d_out=b.shape[0], rank=a.shape[0], alpha=alpha)
    with torch.no_grad():
        adapter.A.copy_(a)
        adapter.B.copy_(b)
    return adapter


def test_default_targets_give_one_adapter_per_block_q_and_v():
    enc = build_image_encoder(ViTConfig(), seed=0)
    adapters = inject(enc.projections(), rank=4, seed=0)
    assert sorted(adapters) == [
        "blocks.0.attn.q",
        "blocks.0.attn.v",
        "blocks.1.attn.q",
        "blocks.1.attn.v",
    ]


def test_vitb_rank512_parameter_count_per_projection():
    assert lora_param_count(768, 768, 512) == 786_432
    assert count_adapter_params(ViTConfig.vitb(), ("q", "v"), rank=512) == 24 * 786_432


def test_injection_deterministic_from_seed():
    enc = build_image_encoder(ViTConfig(), seed=0)
    first = inject(enc.projections(), rank=4, seed=11)
    second = inject(enc.projections(), rank=4, seed=11)
    third = inject(enc.projections(), rank=4, seed=12)
    for name in first:
        assert torch.equal(first[name].A, second[name].A)
        assert torch.equal(first[name].B, second[name].B)
    assert not torch.equal(first["blocks.0.attn.q"].A, third["blocks.0.attn.q"].A)


def test_adapted_forward_zero_B_equals_base():
    w0 = torch.randn(5, 3)
    adapter = LoRAAdapter("t", d_in=3, d_out=5, rank=2)
    x = torch.randn(3)
    assert torch.equal(adapted_forward(x, w0, adapter), w0 @ x)


def test_adapted_forward_hand_oracle():
    w0 = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    adapter = make_adapter([[1.0, 1.0]], [[2.0], [0.0]], alpha=1.0)
    out = adapted_forward(torch.tensor([1.0, 0.0]), w0, adapter)
    assert torch.equal(out, torch.tensor([3.0, 3.0]))


def test_alpha_scales_delta_linearly():
    a = [[0.3, -0.2, 0.5]]
    b = [[1.0], [-2.0]]
    x = torch.randn(3)
    w0 = torch.randn(2, 3)
    one = adapted_forward(x, w0, make_adapter(a, b, alpha=1.0)) - w0 @ x
    two = adapted_forward(x, w0, make_adapter(a, b, alpha=2.0)) - w0 @ x
    assert torch.allclose(two, 2.0 * one)


def test_merge_zero_B_is_bit_exact_base():
    w0 = torch.randn(4, 4)
    adapter = LoRAAdapter("t", 4, 4, rank=2)
    assert torch.equal(merge(w0, adapter), w0)


def test_merge_hand_example_and_forward_agreement():
    w0 = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    adapter = make_adapter([[1.0, 1.0]], [[2.0], [0.0]], alpha=1.0)
    merged = merge(w0, adapter)
    assert torch.equal(merged, torch.tensor([[3.0, 4.0], [3.0, 4.0]]))
    rng = torch.Generator().manual_seed(0)
    for _ in range(100):
        x = torch.randn(2, generator=rng)
        af = adapted_forward(x, w0, adapter)
        mx = merged @ x
        assert torch.all((af - mx).abs() <= 1e-5 * (1.0 + mx.abs()))


def test_merge_minus_base_recovers_delta():
    rng = torch.Generator().manual_seed(1)
    w0 = torch.randn(6, 4, generator=rng)
    adapter = make_adapter(torch.randn(2, 4, generator=rng), torch.randn(6, 2, generator=rng), alpha=3.0)
    recovered = merge(w0, adapter) - w0
    assert torch.allclose(recovered, adapter.delta(), atol=1e-6)


@pytest.mark.parametrize("rank,d_in,d_out", [(1, 8, 8), (2, 16, 8), (4, 8, 16), (20, 8, 8)])
def test_delta_rank_bounded(rank, d_in, d_out):
    rng = torch.Generator().manual_seed(rank)
    with pytest.warns(UserWarning) if rank >= min(d_in, d_out) else torch.no_grad():
        adapter = LoRAAdapter("t", d_in, d_out, rank=rank)
    with torch.no_grad():
        adapter.B.copy_(torch.randn(d_out, rank, generator=rng))
    delta = adapter.delta().detach().numpy()
    assert np.linalg.matrix_rank(delta) <= min(rank, d_in, d_out)


def test_inject_empty_match_is_config_error():
    enc = build_image_encoder(ViTConfig(), seed=0)
    with pytest.raises(ConfigError):
        inject(enc.projections(), targets=("nonexistent",), rank=2)


def test_duplicate_injection_rejected():
    enc = build_image_encoder(ViTConfig(), seed=0)
    existing = inject(enc.projections(), targets=("q",), rank=2, seed=0)
    with pytest.raises(ConfigError):
        inject(enc.projections(), targets=("q", "v"), rank=2, seed=0, existing=existing)


def test_rank_at_or_above_dims_warns():
    with pytest.warns(UserWarning, match="no longer low-rank"):
        LoRAAdapter("t", d_in=8, d_out=8, rank=8)


def test_pattern_matching_semantics():
    assert pattern_matches("blocks.0.attn.q", "q")
    assert pattern_matches("blocks.0.mlp.fc1", "mlp")
    assert pattern_matches("blocks.1.attn.out", "blocks.1.*")
    assert not pattern_matches("blocks.0.attn.q", "k")


def test_freeze_policy_partition_on_segmenter():
    seg = build_segmenter(seed=0)
    seg.inject_adapters(rank=4, seed=0)
    policy = FreezePolicy.default()
    policy.apply(seg)
    for name, param in seg.named_parameters():
        frozen = name.startswith(("encoder.", "prompt_encoder."))
        assert param.requires_grad == (not frozen), name


def test_freeze_policy_rejects_overlap_and_gaps():
    both = FreezePolicy(frozen_patterns=("a.*",), trainable_patterns=("a.*",))
    with pytest.raises(ConfigError):
        both.is_trainable("a.weight")
    neither = FreezePolicy(frozen_patterns=("x.*",), trainable_patterns=("y.*",))
    with pytest.raises(ConfigError):
        neither.is_trainable("z.weight")


def test_trainable_count_no_adapters_all_frozen():
    seg = build_segmenter(seed=0)
    policy = FreezePolicy(frozen_patterns=("*",), trainable_patterns=())
    counts = trainable_count(seg.named_parameters(), policy)
    assert counts.trainable == 0
    assert counts.frozen > 0
    assert counts.fraction == 0.0


def test_trainable_count_desk_adapter_arithmetic():
    # 4 adapters x 4*(32+32) = 1024 adapter params; decoder counted separately
    seg = build_segmenter(seed=0)
    seg.inject_adapters(rank=4, seed=0)
    adapter_params = [
        (f"{ad.target}.lora.{f}", getattr(ad, f))
        for ad in seg.adapters.values()
        for f in ("A", "B")
    ]
    policy = FreezePolicy(frozen_patterns=(), trainable_patterns=("*",))
    counts = trainable_count(adapter_params, policy)
    assert counts.trainable == 4 * lora_param_count(32, 32, 4) == 1024

    full = trainable_count(seg.named_parameters(), FreezePolicy.default())
    decoder_params = sum(p.numel() for n, p in seg.named_parameters() if n.startswith("decoder."))
    assert full.trainable == 1024 + decoder_params
    assert full.to_dict()["fraction"] == pytest.approx(full.trainable / (full.trainable + full.frozen))


def test_param_counts_dataclass():
    counts = ParamCounts(trainable=1, frozen=3)
    assert counts.fraction == 0.25
    assert counts.to_dict() == {"trainable": 1, "frozen": 3, "fraction": 0.25}


def test_trainable_count_accepts_adapter_set_directly():
    enc = build_image_encoder(ViTConfig(), seed=0)
    adapters = inject(enc.projections(), rank=4, seed=0)
    base = [("encoder." + n, p) for n, p in enc.named_parameters()]
    policy = FreezePolicy(frozen_patterns=("encoder.*",), trainable_patterns=("adapters.*",))
    counts = trainable_count(base, policy, adapters=adapters)
    assert counts.trainable == 1024
    assert counts.frozen == sum(p.numel() for p in enc.parameters())
