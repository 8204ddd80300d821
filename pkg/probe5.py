"""Probe 5: diffusion legs against the scale-calibrated codec."""
import json
import math
import time

import numpy as np
import torch

from surgvid.codec import ConvCodec
from surgvid.conditioning import TemplateTextEncoder
from surgvid.config import (
    DenoiserConfig, LoraConfig, SamplerConfig, TrainerConfig,
)
from surgvid.denoiser import Denoiser
from surgvid.depth import DepthHead
from surgvid.diffusion import fit
from surgvid.metrics import psnr
from surgvid.pipeline import (
    conditioning_inputs, generate_video, prepare_clip_latents,
)
from surgvid.synthetic import (
    DOT_RADIUS, extract_dot_centroid, make_integration_set,
    trajectory_adherence,
)

train, heldout = make_integration_set()
codec = ConvCodec.load("/tmp/codec_cal.pt")
print("codec loaded", flush=True)

dcfg = DenoiserConfig(token_dim=96, depth=1, heads=2, ff_mult=4, text_dim=64, seed=0)
enc = TemplateTextEncoder(dim=64, seed=0)
model = Denoiser(dcfg, codec.latent_channels, lora_cfg=LoraConfig(rank=32, alpha=64.0))
head = DepthHead(codec.latent_channels, dim=64, seed=0)
entries = prepare_clip_latents(train, codec, enc, with_depth=True)


def dist_stats(video, rec):
    dists, missing = [], 0
    for p in rec.trajectory.points:
        c = extract_dot_centroid(video[p.frame])
        if c is None:
            missing += 1
            continue
        dists.append(math.hypot(c[0] - p.x, c[1] - p.y))
    peaks = video.min(axis=-1).max(axis=(1, 2))
    peak = (f"peak p10 {np.percentile(peaks, 10):.2f} "
            f"p50 {np.percentile(peaks, 50):.2f} "
            f"p90 {np.percentile(peaks, 90):.2f}")
    if not dists:
        return "all missing " + peak
    d = np.array(dists)
    return (f"dist p50 {np.percentile(d, 50):.1f} p90 {np.percentile(d, 90):.1f} "
            f"max {d.max():.1f} missing {missing} " + peak)


def checkpoint_eval(tag, full=False):
    model.eval()
    clips = [("train0", train[0]), ("heldout", heldout)]
    if full:
        clips = [(f"train{i}", r) for i, r in enumerate(train)] + [("heldout", heldout)]
    for name, rec in clips:
        bundle = conditioning_inputs(
            rec.frames[0], rec.affordance.mask, rec.trajectory,
            rec.tool, rec.action, codec, enc,
        )
        for scale in (1.0, 3.5) if full and name in ("train0", "heldout") else (1.0,):
            sampler = SamplerConfig(steps=50, guidance_scale=scale, seed=0)
            video = generate_video(model, codec, bundle, rec.frames.shape[:3], sampler)
            adh = trajectory_adherence(video, rec.trajectory, DOT_RADIUS + 2)
            print(
                f"[{tag}] {name} s={scale}: psnr {psnr(rec.frames, video):.1f} dB "
                f"adh {adh:.2f} {dist_stats(video, rec)}",
                flush=True,
            )
    model.train()


t0 = time.time()
total = 0
history = []
for leg, steps in enumerate([1000, 500, 500]):
    cfg = TrainerConfig(steps=steps, lr=1e-3, condition_drop_prob=0.2,
                        depth_loss_weight=0.1, seed=leg, log_every=200)
    history += fit(model, entries, cfg, depth_head=head,
                   log=lambda s, l: print(f"  step {s}: flow {l['flow']:.4f}", flush=True))
    total += steps
    torch.save(model.state_dict(), f"/tmp/probe5_model_{total}.pt")
    with open("/tmp/probe5_hist.json", "w") as f:
        json.dump(history, f)
    checkpoint_eval(f"{total} steps, {(time.time() - t0) / 60:.0f} min",
                    full=(total == 2000))
