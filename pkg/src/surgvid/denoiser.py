"""In-context conditioned diffusion transformer.

The velocity network consumes one flat token sequence laid out as
[trajectory][affordance][reference][video] — conditioning latents are
clean tokens, marked by learned segment embeddings, and the model output
is read from the video positions only. Text enters through cross-attention
in every block. The backbone (attention/feed-forward blocks, their
modulation, the time MLP) is frozen; training touches the LoRA residuals
plus the task modules that interface with our latent space (latent in/out
projections, conditioning adapters, segment embeddings, null tokens).
"""

from __future__ import annotations

import math

import torch
from torch import nn
import torch.nn.functional as F

from surgvid.conditioning import ConditioningBundle
from surgvid.config import DenoiserConfig, LoraConfig
from surgvid.lora import wrap_if_targeted

SEGMENTS = ("trajectory", "affordance", "reference", "video")


def sincos_features(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Classic transformer sin/cos features of scalar positions."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0)
        * torch.arange(half, dtype=torch.float64)
        / max(half, 1)
    )
    args = positions.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if emb.shape[1] < dim:
        emb = nn.functional.pad(emb, (0, dim - emb.shape[1]))
    return emb


def positional_grid(shape: tuple, dim: int) -> torch.Tensor:
    """3D sinusoidal positions for a (T', H', W') token grid -> (N, dim).

    The same function is applied to every segment so tokens that describe
    the same spatiotemporal cell in different segments share positions.
    """
    t, h, w = shape
    d_s = dim // 3
    d_t = dim - 2 * d_s
    emb_t = sincos_features(torch.arange(t), d_t)
    emb_h = sincos_features(torch.arange(h), d_s)
    emb_w = sincos_features(torch.arange(w), d_s)
    grid = torch.cat(
        [
            emb_t[:, None, None, :].expand(t, h, w, d_t),
            emb_h[None, :, None, :].expand(t, h, w, d_s),
            emb_w[None, None, :, :].expand(t, h, w, d_s),
        ],
        dim=-1,
    )
    return grid.reshape(t * h * w, dim)


def _attention(q, k, v, heads: int) -> torch.Tensor:
    n, dim = q.shape
    m = k.shape[0]
    hd = dim // heads
    q = q.reshape(n, heads, hd).transpose(0, 1)
    k = k.reshape(m, heads, hd).transpose(0, 1)
    v = v.reshape(m, heads, hd).transpose(0, 1)
    out = F.scaled_dot_product_attention(q, k, v)
    return out.transpose(0, 1).reshape(n, dim)


class Block(nn.Module):
    """Pre-LN transformer block with adaptive modulation from the timestep."""

    def __init__(self, cfg: DenoiserConfig, lora_cfg: LoraConfig | None):
        super().__init__()
        d = cfg.token_dim
        self.heads = cfg.heads
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False)
        self.attn_q = wrap_if_targeted(nn.Linear(d, d), "attn_q", lora_cfg)
        self.attn_k = wrap_if_targeted(nn.Linear(d, d), "attn_k", lora_cfg)
        self.attn_v = wrap_if_targeted(nn.Linear(d, d), "attn_v", lora_cfg)
        self.attn_out = wrap_if_targeted(nn.Linear(d, d), "attn_out", lora_cfg)
        self.use_text = cfg.text_cross_attention
        if self.use_text:
            self.xnorm = nn.LayerNorm(d, elementwise_affine=False)
            self.xattn_q = wrap_if_targeted(nn.Linear(d, d), "xattn_q", lora_cfg)
            self.xattn_k = wrap_if_targeted(
                nn.Linear(cfg.text_dim, d), "xattn_k", lora_cfg
            )
            self.xattn_v = wrap_if_targeted(
                nn.Linear(cfg.text_dim, d), "xattn_v", lora_cfg
            )
            self.xattn_out = wrap_if_targeted(
                nn.Linear(d, d), "xattn_out", lora_cfg
            )
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False)
        self.ff_in = wrap_if_targeted(
            nn.Linear(d, d * cfg.ff_mult), "ff_in", lora_cfg
        )
        self.ff_out = wrap_if_targeted(
            nn.Linear(d * cfg.ff_mult, d), "ff_out", lora_cfg
        )
        # Timestep -> per-block shift/scale/gate pairs (frozen backbone map).
        self.modulation = nn.Linear(d, 6 * d)
        self.modulation.weight.requires_grad_(False)
        self.modulation.bias.requires_grad_(False)

    def forward(self, x, t_emb, text):
        sh1, sc1, g1, sh2, sc2, g2 = self.modulation(t_emb).chunk(6, dim=-1)
        h = self.norm1(x) * (1 + sc1) + sh1
        attn = _attention(
            self.attn_q(h), self.attn_k(h), self.attn_v(h), self.heads
        )
        x = x + (1 + g1) * self.attn_out(attn)
        if self.use_text:
            h = self.xnorm(x)
            xattn = _attention(
                self.xattn_q(h), self.xattn_k(text), self.xattn_v(text),
                self.heads,
            )
            x = x + self.xattn_out(xattn)
        h = self.norm2(x) * (1 + sc2) + sh2
        x = x + (1 + g2) * self.ff_out(nn.functional.gelu(self.ff_in(h)))
        return x


class Denoiser(nn.Module):
    """Velocity predictor v_hat = D(z_t, t, bundle)."""

    def __init__(
        self,
        cfg: DenoiserConfig,
        latent_channels: int,
        lora_cfg: LoraConfig | None = None,
    ):
        super().__init__()
        torch.manual_seed(cfg.seed)
        self.cfg = cfg
        self.latent_channels = latent_channels
        d = cfg.token_dim
        if d < latent_channels:
            raise ValueError(
                f"token_dim {d} must be >= latent channels {latent_channels}; "
                "a narrower width would bottleneck every latent token"
            )
        # Frozen backbone pieces: the timestep embedding and the attention/
        # feed-forward stacks (adapted only through their LoRA residuals).
        self.time_mlp = nn.Sequential(
            nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d)
        )
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False)
        self.blocks = nn.ModuleList(
            Block(cfg, lora_cfg) for _ in range(cfg.depth)
        )
        for p in self.time_mlp.parameters():
            p.requires_grad_(False)
        # Task modules, trained alongside the LoRA residuals. The latent
        # space belongs to our codec, not to any pretrained stack, so the
        # in/out projections that touch it have to adapt: a frozen random
        # head cannot be steered into a new latent basis by rank-r residuals
        # alone.
        self.proj_video = nn.Linear(latent_channels, d)
        self.head = nn.Linear(d, latent_channels)
        self.proj_trajectory = nn.Linear(latent_channels, d)
        self.proj_affordance = nn.Linear(latent_channels, d)
        self.proj_reference = nn.Linear(latent_channels, d)
        self.segment_embedding = nn.Parameter(0.02 * torch.randn(4, d))
        self.null_tokens = nn.Parameter(0.02 * torch.randn(4, d))
        self.null_text = nn.Parameter(0.02 * torch.randn(1, cfg.text_dim))

    # ------------------------------------------------------------------

    def _segment_tokens(self, name, latent3d, proj, nulled, dtype):
        if latent3d.shape[-1] != self.latent_channels:
            raise ValueError(
                f"{name} segment has {latent3d.shape[-1]} channels, "
                f"model expects {self.latent_channels}"
            )
        grid = tuple(latent3d.shape[:3])
        n = grid[0] * grid[1] * grid[2]
        idx = SEGMENTS.index(name)
        if nulled:
            x = self.null_tokens[idx].to(dtype).expand(n, -1)
        else:
            x = proj(latent3d.reshape(n, self.latent_channels).to(dtype))
        pos = positional_grid(grid, self.cfg.token_dim).to(dtype)
        return x + self.segment_embedding[idx].to(dtype) + pos

    def forward(
        self, z_t: torch.Tensor, t: float, bundle: ConditioningBundle
    ) -> torch.Tensor:
        if z_t.shape[-1] != self.latent_channels:
            raise ValueError(
                f"video segment has {z_t.shape[-1]} channels, model expects "
                f"{self.latent_channels}"
            )
        spatial = tuple(z_t.shape[1:3])
        for name, z in (
            ("trajectory", bundle.z_p),
            ("affordance", bundle.z_gamma),
            ("reference", bundle.z_f),
        ):
            if tuple(z.shape[1:3]) != spatial:
                raise ValueError(
                    f"{name} segment grid {tuple(z.shape[1:3])} does not "
                    f"match video grid {spatial}"
                )
        dtype = self.head.weight.dtype
        flags = bundle.null_flags
        parts = [
            self._segment_tokens(
                "trajectory", bundle.z_p, self.proj_trajectory,
                flags.trajectory, dtype,
            ),
            self._segment_tokens(
                "affordance", bundle.z_gamma, self.proj_affordance,
                flags.affordance, dtype,
            ),
            self._segment_tokens(
                "reference", bundle.z_f, self.proj_reference,
                flags.reference, dtype,
            ),
            self._segment_tokens(
                "video", z_t, self.proj_video, False, dtype
            ),
        ]
        x = torch.cat(parts, dim=0)
        t_val = torch.as_tensor(float(t), dtype=torch.float64)
        t_emb = sincos_features(t_val[None] * 1000.0, self.cfg.token_dim)[0]
        t_emb = self.time_mlp(t_emb.to(dtype))
        if self.cfg.text_cross_attention:
            text = (
                self.null_text.to(dtype)
                if flags.text
                else bundle.z_a.to(dtype)
            )
        else:
            text = None
        for block in self.blocks:
            x = block(x, t_emb, text)
        x = self.final_norm(x)
        n_video = z_t.shape[0] * z_t.shape[1] * z_t.shape[2]
        v = self.head(x[-n_video:])
        return v.reshape(z_t.shape)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]
