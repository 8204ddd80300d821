import numpy as np
import pytest
import torch

from surgvid.codec import PatchifyCodec
from surgvid.conditioning import TemplateTextEncoder
from surgvid.config import DenoiserConfig, LoraConfig
from surgvid.denoiser import Denoiser


def rng_video(t=5, h=8, w=8, seed=0):
    """Random float32 video in [0,1]."""
    return np.random.default_rng(seed).random((t, h, w, 3)).astype(np.float32)


@pytest.fixture
def patchify():
    return PatchifyCodec(2, 4)


@pytest.fixture
def tiny_text_encoder():
    return TemplateTextEncoder(dim=16, seed=0)


def tiny_denoiser(latent_channels=96, token_dim=96, depth=1, heads=2,
                  text_dim=16, rank=2, seed=0):
    cfg = DenoiserConfig(
        token_dim=token_dim, depth=depth, heads=heads, ff_mult=2,
        text_dim=text_dim, seed=seed,
    )
    return Denoiser(cfg, latent_channels, lora_cfg=LoraConfig(rank=rank, alpha=4.0))


def make_bundle(codec, text_encoder, t=5, h=8, w=8, seed=0):
    """A self-consistent bundle + clean latent for a random video."""
    from surgvid.conditioning import (
        PromptSpec, TrajectoryPoint, TrajectorySequence, rasterize_trajectory,
        AffordanceMask, encode_affordance, build_bundle,
    )
    from surgvid.enums import Action, Tool

    rng = np.random.default_rng(seed)
    video = rng.random((t, h, w, 3)).astype(np.float32)
    points = tuple(
        TrajectoryPoint(frame=i, x=float(w // 2), y=float(h // 2), present=True)
        for i in range(t)
    )
    traj = TrajectorySequence(points=points, tool_class=0, length=t, canvas=(w, h))
    maps = rasterize_trajectory(traj, h, w, radius=2)
    mask = AffordanceMask(mask=np.ones((h, w), dtype=np.float32))
    prompt = PromptSpec(tool=Tool.GRASPER, action=Action.GRASPING)
    bundle = build_bundle(prompt, video[0], mask, maps, codec, text_encoder)
    z_0 = codec.encode(video).tokens.to(torch.float32)
    return bundle, z_0, video
