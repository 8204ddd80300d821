"""End-to-end wiring shared by the CLI, the service, and integration runs:
clip -> latents/bundles for training, and request -> video for inference.
"""

from __future__ import annotations

import numpy as np
import torch

from surgvid.codec import LatentVideo
from surgvid.conditioning import (
    PromptSpec,
    TrajectorySequence,
    build_bundle,
    encode_affordance,
    rasterize_trajectory,
)
from surgvid.config import RunConfig
from surgvid.depth import gradient_depth_provider, prepare_depth_latents
from surgvid.diffusion import sample
from surgvid.enums import Action, Tool


def conditioning_inputs(
    ref_frame: np.ndarray,
    affordance_mask: np.ndarray,
    trajectory: TrajectorySequence,
    tool: Tool,
    action: Action,
    codec,
    text_encoder,
):
    """Build a ConditioningBundle from raw image-space inputs."""
    h, w = ref_frame.shape[:2]
    prompt = PromptSpec(tool=tool, action=action)
    traj_maps = rasterize_trajectory(trajectory, h, w)
    affordance = encode_affordance(affordance_mask, h, w)
    return build_bundle(
        prompt, ref_frame, affordance, traj_maps, codec, text_encoder
    )


def prepare_clip_latents(
    records: list, codec, text_encoder, with_depth: bool = True
) -> list:
    """Per-clip training inputs: clean latents, bundle, depth tokens."""
    entries = []
    for rec in records:
        h, w = rec.frames.shape[1:3]
        z_0 = codec.encode(rec.frames).tokens.to(torch.float32)
        bundle = conditioning_inputs(
            rec.frames[0],
            rec.affordance.mask,
            rec.trajectory,
            rec.tool,
            rec.action,
            codec,
            text_encoder,
        )
        entry = {"clip_id": rec.clip_id, "z_0": z_0, "bundle": bundle}
        if with_depth:
            depth = gradient_depth_provider(rec.frames)
            entry["depth_tokens"] = prepare_depth_latents(
                depth, codec, rgb_shape=rec.frames.shape
            ).depth_tokens.to(torch.float32)
        entries.append(entry)
    return entries


def generate_video(
    model,
    codec,
    bundle,
    source_shape: tuple,
    sampler_cfg,
    progress=None,
) -> np.ndarray:
    """Sample a latent video and decode it back to pixels in [0,1]."""
    t, h, w = source_shape
    t_lat = 1 + (t - 1) // codec.t_f
    shape = (t_lat, h // codec.s_f, w // codec.s_f, codec.latent_channels)
    if progress is None:
        tokens = sample(model, bundle, shape, sampler_cfg)
    else:
        tokens = _sample_with_progress(
            model, bundle, shape, sampler_cfg, progress
        )
    latent = LatentVideo(
        tokens=tokens, factors=(codec.t_f, codec.s_f), source_shape=source_shape
    )
    return np.clip(codec.decode(latent), 0.0, 1.0)


def _sample_with_progress(model, bundle, shape, cfg, progress):
    """Same integration loop as diffusion.sample, reporting step i of N."""
    from surgvid.diffusion import cfg_velocity, null_bundle

    gen = torch.Generator().manual_seed(cfg.seed)
    z = torch.randn(shape, generator=gen)
    uncond = null_bundle(bundle)
    dt = 1.0 / cfg.steps
    t = 1.0
    with torch.no_grad():
        for i in range(cfg.steps):
            v_c = model(z, t, bundle)
            if cfg.guidance_scale == 1.0:
                v = v_c
            else:
                v_u = model(z, t, uncond)
                v = cfg_velocity(v_c, v_u, cfg.guidance_scale)
            z = z - dt * v
            if not torch.isfinite(z).all():
                raise RuntimeError(
                    f"sampling diverged at step {i + 1}/{cfg.steps}"
                )
            t -= dt
            progress(i + 1, cfg.steps)
    return z


def training_run(
    records: list,
    cfg: RunConfig,
    codec,
    text_encoder,
    with_depth: bool = True,
    log=None,
):
    """Train the adapter stack on prepared clips; returns model pieces."""
    from surgvid.denoiser import Denoiser
    from surgvid.depth import DepthHead
    from surgvid.diffusion import fit

    entries = prepare_clip_latents(
        records, codec, text_encoder, with_depth=with_depth
    )
    model = Denoiser(
        cfg.denoiser, codec.latent_channels, lora_cfg=cfg.lora
    )
    depth_head = (
        DepthHead(codec.latent_channels, seed=cfg.denoiser.seed)
        if with_depth
        else None
    )
    history = fit(model, entries, cfg.trainer, depth_head=depth_head, log=log)
    return model, depth_head, entries, history
