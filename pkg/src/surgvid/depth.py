"""Masked-depth-latent consistency objective.

Depth videos are pushed through the same frozen codec as RGB (replicated
to 3 channels), a random half of the latent token positions is masked, and
a small head — one cross-attention layer whose queries are a learned mask
token plus positional embeddings and whose keys/values are the denoised
RGB tokens — must reconstruct the masked depth tokens. Scored with Smooth
l1. The head trains alongside the adapters and never participates in
inference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import nn

from surgvid.denoiser import positional_grid


@dataclass
class DepthLatentBatch:
    depth_tokens: torch.Tensor           # T' x H' x W' x C
    mask_ratio: float = 0.5
    masked_index_set: np.ndarray | None = None
    rng_seed: int | None = None

    @property
    def grid(self) -> tuple:
        return tuple(self.depth_tokens.shape[:3])

    @property
    def token_count(self) -> int:
        t, h, w = self.grid
        return t * h * w

    def masked_targets(self) -> torch.Tensor:
        if self.masked_index_set is None:
            raise ValueError("batch has no mask; call mask_tokens first")
        flat = self.depth_tokens.reshape(self.token_count, -1)
        return flat[torch.from_numpy(self.masked_index_set)]


def normalize_depth(depth: np.ndarray) -> np.ndarray:
    """Per-clip min-max normalization to [0,1] (provider-agnostic)."""
    depth = np.asarray(depth, dtype=np.float32)
    lo, hi = float(depth.min()), float(depth.max())
    if hi - lo < 1e-12:
        return np.zeros_like(depth)
    return (depth - lo) / (hi - lo)


def gradient_depth_provider(
    frames: np.ndarray, object_threshold: float = 0.85
) -> np.ndarray:
    """Synthetic monocular depth: vertical gradient, objects pulled nearer.

    Stands in for an external depth estimator during desk-scale runs; any
    provider returning per-frame maps in [0,1] can replace it.
    """
    frames = np.asarray(frames, dtype=np.float32)
    t, h, w, _ = frames.shape
    gradient = np.linspace(0.25, 1.0, h, dtype=np.float32)[None, :, None]
    gradient = np.broadcast_to(gradient, (t, h, w)).copy()
    objects = frames.max(axis=-1) > object_threshold
    gradient[objects] *= 0.3
    return normalize_depth(gradient)[..., None]


def prepare_depth_latents(
    depth_video: np.ndarray, codec, rgb_shape: tuple | None = None
) -> DepthLatentBatch:
    """Encode a T x H x W x 1 depth video with the frozen codec (unmasked)."""
    depth_video = np.asarray(depth_video, dtype=np.float32)
    if depth_video.ndim != 4 or depth_video.shape[-1] != 1:
        raise ValueError(
            f"depth video must be TxHxWx1, got {depth_video.shape}"
        )
    if rgb_shape is not None and tuple(depth_video.shape[:3]) != tuple(
        rgb_shape[:3]
    ):
        raise ValueError(
            f"depth video shape {depth_video.shape[:3]} does not match the "
            f"paired RGB clip {tuple(rgb_shape[:3])}"
        )
    rgb_like = np.repeat(depth_video, 3, axis=-1)
    latent = codec.encode(rgb_like)
    return DepthLatentBatch(depth_tokens=latent.tokens)


def mask_tokens(
    batch: DepthLatentBatch, mask_ratio: float, seed: int
) -> DepthLatentBatch:
    """Pick round(ratio * count) distinct token positions to reconstruct."""
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError(f"mask_ratio must be in (0,1), got {mask_ratio}")
    n = batch.token_count
    count = round(mask_ratio * n)
    if count == 0:
        raise ValueError(
            f"mask ratio {mask_ratio} too small for token count {n}"
        )
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=count, replace=False))
    return replace(
        batch, mask_ratio=mask_ratio, masked_index_set=idx, rng_seed=seed
    )


class DepthHead(nn.Module):
    """Cross-attention reconstruction head for masked depth tokens.

    Queries are built from positions only (learned mask token + positional
    embedding), so the head cannot read any depth values; all content comes
    from the denoised RGB tokens through keys/values.
    """

    def __init__(self, latent_channels: int, dim: int = 64, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.dim = dim
        self.mask_token = nn.Parameter(0.02 * torch.randn(dim))
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(latent_channels, dim)
        self.v_proj = nn.Linear(latent_channels, dim)
        self.out = nn.Linear(dim, latent_channels)

    def forward(
        self, rgb_tokens_flat: torch.Tensor, positions: torch.Tensor
    ) -> torch.Tensor:
        q = self.q_proj(self.mask_token + positions)
        k = self.k_proj(rgb_tokens_flat)
        v = self.v_proj(rgb_tokens_flat)
        attn = torch.softmax(q @ k.T / math.sqrt(self.dim), dim=-1)
        return self.out(attn @ v)


def predict_masked_depth(
    denoised_rgb_tokens: torch.Tensor,
    batch: DepthLatentBatch,
    head: DepthHead,
) -> torch.Tensor:
    """Reconstruct depth tokens at the masked positions from RGB tokens."""
    if tuple(denoised_rgb_tokens.shape[:3]) != batch.grid:
        raise ValueError(
            f"RGB token grid {tuple(denoised_rgb_tokens.shape[:3])} does not "
            f"match depth token grid {batch.grid}"
        )
    if batch.masked_index_set is None:
        raise ValueError("batch has no mask; call mask_tokens first")
    n = batch.token_count
    rgb_flat = denoised_rgb_tokens.reshape(n, -1)
    pos = positional_grid(batch.grid, head.dim).to(rgb_flat.dtype)
    masked_pos = pos[torch.from_numpy(batch.masked_index_set)]
    return head(rgb_flat, masked_pos)


def smooth_l1(
    pred: torch.Tensor, target: torch.Tensor, beta: float = 1.0
) -> torch.Tensor:
    """Mean Smooth l1: quadratic inside |d| < beta, linear outside."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    if pred.shape != target.shape:
        raise ValueError(
            f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}"
        )
    d = pred - target
    absd = d.abs()
    return torch.where(
        absd < beta, 0.5 * d * d / beta, absd - 0.5 * beta
    ).mean()
