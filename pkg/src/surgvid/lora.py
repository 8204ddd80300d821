"""Low-rank adapters for frozen linear projections."""

from __future__ import annotations

import torch
from torch import nn


def lora_forward(
    x: torch.Tensor,
    weight: torch.Tensor,
    a: torch.Tensor,
    b: torch.Tensor,
    rank: int,
    alpha: float,
) -> torch.Tensor:
    """y = W x + (alpha/r) * B (A x) for a single input vector or batch."""
    if a.shape[0] != rank or b.shape[1] != rank:
        raise ValueError(
            f"rank mismatch: expected A {rank}x{weight.shape[1]} and "
            f"B {weight.shape[0]}x{rank}, got A {tuple(a.shape)} and "
            f"B {tuple(b.shape)}"
        )
    base = x @ weight.T
    return base + (alpha / rank) * ((x @ a.T) @ b.T)


class LoRALinear(nn.Module):
    """A frozen ``nn.Linear`` plus a trainable low-rank residual.

    A is random-normal (std 1/r), B starts at zero so the module is exactly
    the base map at initialization. ``merged_weight`` returns
    W + (alpha/r) B A for equivalence checks and deployment-style fusion.
    """

    def __init__(
        self,
        base: nn.Linear,
        rank: int,
        alpha: float,
        dropout: float = 0.0,
    ):
        super().__init__()
        if rank < 1:
            raise ValueError(f"rank must be >= 1, got {rank}")
        self.base = base
        self.base.weight.requires_grad_(False)
        if self.base.bias is not None:
            self.base.bias.requires_grad_(False)
        self.rank = rank
        self.alpha = alpha
        self.scale = alpha / rank
        self.lora_a = nn.Parameter(
            torch.randn(rank, base.in_features) / rank
        )
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))
        self.dropout = nn.Dropout(dropout) if dropout > 0 else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        down = self.dropout(x) @ self.lora_a.T
        return self.base(x) + self.scale * (down @ self.lora_b.T)

    def merged_weight(self) -> torch.Tensor:
        return self.base.weight + self.scale * (self.lora_b @ self.lora_a)


def wrap_if_targeted(
    layer: nn.Linear, name: str, lora_cfg
) -> nn.Module:
    """Wrap ``layer`` in a LoRA adapter when ``name`` matches a target.

    Non-targeted layers stay plain but are frozen: everything trainable in
    the backbone must be an adapter.
    """
    if lora_cfg is not None and any(t in name for t in lora_cfg.targets):
        return LoRALinear(
            layer, rank=lora_cfg.rank, alpha=lora_cfg.alpha,
            dropout=lora_cfg.dropout,
        )
    layer.weight.requires_grad_(False)
    if layer.bias is not None:
        layer.bias.requires_grad_(False)
    return layer
