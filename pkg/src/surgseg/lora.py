"""Low-rank adaptation: rank-r deltas attached to named frozen projections.

An adapter holds factors A (r x d_in) and B (d_out x r) plus a scale
alpha/r; its delta is (alpha/r)*B@A. B starts at zero so a freshly
injected adapter leaves the base model output untouched.
"""

from __future__ import annotations

import fnmatch
import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import torch
from torch import Tensor, nn

from .errors import ConfigError, InputError
from .encoder import ViTConfig, projection_shapes

DEFAULT_TARGETS: tuple[str, ...] = ("q", "v")


def lora_param_count(d_in: int, d_out: int, rank: int) -> int:
    """Parameters added by one adapter: r*(d_in + d_out)."""
    return rank * (d_in + d_out)


class LoRAAdapter(nn.Module):
    """Trainable delta for one projection; ``forward`` returns the delta only.

    The adapted projection is ``base(x) + adapter(x)``. Row-vector inputs,
    matching ``nn.Linear``.
    """

    def __init__(
        self,
        target: str,
        d_in: int,
        d_out: int,
        rank: int,
        alpha: float | None = None,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if rank < 1:
            raise ConfigError(f"rank must be >= 1, got {rank}")
        if rank >= min(d_in, d_out):
            warnings.warn(
                f"rank {rank} >= min(d_in, d_out) = {min(d_in, d_out)} on '{target}': "
                "the delta is no longer low-rank in effect",
                stacklevel=2,
            )
        self.target = target
        self.rank = rank
        self.alpha = float(rank if alpha is None else alpha)
        bound = 1.0 / d_in**0.5
        a = torch.empty(rank, d_in).uniform_(-bound, bound, generator=generator)
        self.A = nn.Parameter(a)
        self.B = nn.Parameter(torch.zeros(d_out, rank))

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def forward(self, x: Tensor) -> Tensor:
        return (x @ self.A.T @ self.B.T) * self.scale

    def delta(self) -> Tensor:
        """Dense weight delta (d_out, d_in)."""
        return self.scale * (self.B @ self.A)

    def extra_repr(self) -> str:
        return f"target={self.target}, rank={self.rank}, alpha={self.alpha}"


def pattern_matches(name: str, pattern: str) -> bool:
    """A pattern hits a projection if it globs the full dotted name or
    equals one of its components ("q" matches "blocks.0.attn.q")."""
    return fnmatch.fnmatchcase(name, pattern) or pattern in name.split(".")


def inject(
    projections: Mapping[str, nn.Linear],
    targets: Sequence[str] = DEFAULT_TARGETS,
    rank: int = 4,
    alpha: float | None = None,
    seed: int = 0,
    existing: Mapping[str, LoRAAdapter] | None = None,
) -> dict[str, LoRAAdapter]:
    """One adapter per matched projection, deterministic from ``seed``.

    Base weights are never touched. Raises ConfigError when no projection
    matches or when a matched target already carries an adapter.
    """
    matched = sorted(
        name for name in projections if any(pattern_matches(name, t) for t in targets)
    )
    if not matched:
        raise ConfigError(f"no projection matches targets {list(targets)}")
    if existing:
        clash = sorted(set(matched) & set(existing))
        if clash:
            raise ConfigError(f"adapter already injected on {clash}")
    gen = torch.Generator().manual_seed(seed)
    adapters: dict[str, LoRAAdapter] = {}
    for name in matched:
        linear = projections[name]
        adapters[name] = LoRAAdapter(
            name, linear.in_features, linear.out_features, rank, alpha, generator=gen
        )
    return adapters


def adapted_forward(x: Tensor, w0: Tensor, adapter: LoRAAdapter) -> Tensor:
    """Column-vector form of the adapted projection: W0 x + (alpha/r) B (A x)."""
    if x.shape[0] != w0.shape[1]:
        raise InputError(f"x has {x.shape[0]} rows, W0 expects {w0.shape[1]}")
    return w0 @ x + adapter.scale * (adapter.B @ (adapter.A @ x))


def merge(w0: Tensor, adapter: LoRAAdapter) -> Tensor:
    """Fold the delta into the base weight: W0 + (alpha/r) B A."""
    if w0.shape != (adapter.B.shape[0], adapter.A.shape[1]):
        raise InputError(
            f"W0 shape {tuple(w0.shape)} does not match adapter "
            f"({adapter.B.shape[0]}, {adapter.A.shape[1]})"
        )
    return w0 + adapter.delta().to(w0.dtype)


def count_adapter_params(
    cfg: ViTConfig, targets: Sequence[str] = DEFAULT_TARGETS, rank: int = 4
) -> int:
    """Total adapter parameters for a target set, by shape arithmetic alone."""
    total = 0
    for name, (d_out, d_in) in projection_shapes(cfg).items():
        if any(pattern_matches(name, t) for t in targets):
            total += lora_param_count(d_in, d_out, rank)
    if total == 0:
        raise ConfigError(f"no projection matches targets {list(targets)}")
    return total


@dataclass(frozen=True)
class FreezePolicy:
    """Name-pattern partition of parameters into frozen and trainable.

    Every parameter must match exactly one side. The default freezes the
    image-encoder base and the prompt encoder, and trains adapters plus
    the mask decoder.
    """

    frozen_patterns: tuple[str, ...]
    trainable_patterns: tuple[str, ...]

    @classmethod
    def default(cls) -> "FreezePolicy":
        return cls(
            frozen_patterns=("encoder.*", "prompt_encoder.*"),
            trainable_patterns=("adapters.*", "decoder.*"),
        )

    def is_trainable(self, name: str) -> bool:
        frozen = any(fnmatch.fnmatchcase(name, p) for p in self.frozen_patterns)
        trainable = any(fnmatch.fnmatchcase(name, p) for p in self.trainable_patterns)
        if frozen and trainable:
            raise ConfigError(f"parameter '{name}' matches both frozen and trainable patterns")
        if not frozen and not trainable:
            raise ConfigError(f"parameter '{name}' matches neither frozen nor trainable patterns")
        return trainable

    def apply(self, module: nn.Module) -> None:
        """Set requires_grad on every parameter per the partition."""
        for name, param in module.named_parameters():
            param.requires_grad_(self.is_trainable(name))


@dataclass(frozen=True)
class ParamCounts:
    trainable: int
    frozen: int

    @property
    def fraction(self) -> float:
        total = self.trainable + self.frozen
        return self.trainable / total if total else 0.0

    def to_dict(self) -> dict[str, float | int]:
        return {"trainable": self.trainable, "frozen": self.frozen, "fraction": self.fraction}


def trainable_count(
    named_params: Iterable[tuple[str, Tensor]],
    policy: FreezePolicy,
    adapters: Mapping[str, LoRAAdapter] | None = None,
) -> ParamCounts:
    """Exact parameter accounting under a freeze policy.

    ``adapters`` appends factor entries under ``adapters.<target>.lora.{A,B}``
    for adapter sets not already present among ``named_params``.
    """
    entries = list(named_params)
    if adapters:
        for adapter in adapters.values():
            entries.append((f"adapters.{adapter.target}.lora.A", adapter.A))
            entries.append((f"adapters.{adapter.target}.lora.B", adapter.B))
    trainable = frozen = 0
    for name, tensor in entries:
        n = tensor.numel()
        if policy.is_trainable(name):
            trainable += n
        else:
            frozen += n
    return ParamCounts(trainable=trainable, frozen=frozen)
