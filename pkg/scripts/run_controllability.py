"""Overfit the codec + adapter stack on the moving-dot fixture and report
reconstruction PSNR and trajectory adherence per clip (held-out included).

Standalone version of the acceptance run, for poking at budgets and
hyperparameters without going through pytest. Saves the codec and model
checkpoints so a partial run can be resumed or inspected.
"""

import argparse
import pathlib
import sys
import time

from surgvid.codec import ConvCodec, standardize_latent_scale, train_autoencoder
from surgvid.conditioning import TemplateTextEncoder
from surgvid.config import (
    DenoiserConfig,
    LoraConfig,
    SamplerConfig,
    TrainerConfig,
)
from surgvid.denoiser import Denoiser
from surgvid.depth import DepthHead
from surgvid.diffusion import fit, save_checkpoint
from surgvid.metrics import psnr
from surgvid.pipeline import (
    conditioning_inputs,
    generate_video,
    prepare_clip_latents,
)
from surgvid.synthetic import (
    DOT_RADIUS,
    codec_training_pool,
    make_integration_set,
    trajectory_adherence,
)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="artifact directory")
    parser.add_argument("--codec-path", default=None,
                        help="load a trained codec instead of training one")
    parser.add_argument("--steps", type=int, default=2000,
                        help="diffusion training steps")
    parser.add_argument("--guidance", type=float, default=1.0)
    parser.add_argument("--sample-steps", type=int, default=50)
    args = parser.parse_args(argv)

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()

    train, heldout = make_integration_set()
    if args.codec_path:
        codec = ConvCodec.load(args.codec_path)
        print(f"codec loaded from {args.codec_path}")
    else:
        codec = ConvCodec(8, 8, latent_channels=96, hidden_channels=128, seed=0)
        pool = codec_training_pool(train)
        for steps, lr, seed in ((3000, 1e-3, 0), (1500, 5e-4, 1)):
            history = train_autoencoder(pool, codec, steps=steps, lr=lr, seed=seed)
            print(f"codec leg {steps}@{lr}: loss {history[-1]:.4f} "
                  f"({time.time() - t0:.0f} s)")
        sigma = standardize_latent_scale(codec, [rec.frames for rec in train])
        print(f"latent scale standardized (folded std {sigma:.4f})")
        codec.save(out / "codec.npz")

    encoder = TemplateTextEncoder(dim=64, seed=0)
    cfg = DenoiserConfig(
        token_dim=96, depth=1, heads=2, ff_mult=4, text_dim=64, seed=0
    )
    model = Denoiser(
        cfg, codec.latent_channels, lora_cfg=LoraConfig(rank=32, alpha=64.0)
    )
    head = DepthHead(codec.latent_channels, dim=64, seed=0)
    entries = prepare_clip_latents(train, codec, encoder, with_depth=True)

    done = 0
    for leg, steps in enumerate((1000, 500, 500)):
        steps = min(steps, max(0, args.steps - done))
        if steps == 0:
            break
        trainer = TrainerConfig(
            steps=steps, lr=1e-3, condition_drop_prob=0.2,
            depth_loss_weight=0.1, seed=leg, log_every=200,
        )
        fit(model, entries, trainer, depth_head=head,
            log=lambda s, l: print(f"  step {done + s}: flow {l['flow']:.4f}",
                                   flush=True))
        done += steps
        save_checkpoint(out / f"model_{done}.npz", model, depth_head=head)
        print(f"leg done at {done} steps ({(time.time() - t0) / 60:.0f} min)")

    model.eval()
    sampler = SamplerConfig(
        steps=args.sample_steps, guidance_scale=args.guidance, seed=0
    )
    tolerance = DOT_RADIUS + 2
    print(f"{'clip':<14} {'psnr':>8} {'adherence':>10}")
    worst = None
    for rec in train + [heldout]:
        bundle = conditioning_inputs(
            rec.frames[0], rec.affordance.mask, rec.trajectory,
            rec.tool, rec.action, codec, encoder,
        )
        video = generate_video(
            model, codec, bundle, rec.frames.shape[:3], sampler
        )
        quality = psnr(rec.frames, video)
        adherence = trajectory_adherence(video, rec.trajectory, tolerance)
        print(f"{rec.clip_id:<14} {quality:>7.1f}  {adherence:>9.2f}")
        if worst is None or adherence < worst:
            worst = adherence
    print(f"total {(time.time() - t0) / 60:.0f} min; "
          f"worst adherence {worst:.2f} at tolerance {tolerance} px")
    return 0


if __name__ == "__main__":
    sys.exit(main())
