"""Command-line entry points for every pipeline stage."""

from __future__ import annotations

import argparse
import dataclasses
import json
import pathlib
import sys

import numpy as np

from surgvid.config import RunConfig, apply_overrides, load_config


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "set", None):
        apply_overrides(cfg, args.set)
    print(f"config hash {cfg.hash()}", file=sys.stderr)
    return cfg


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="TOML/JSON run configuration")
    p.add_argument(
        "--set",
        action="append",
        metavar="SECTION.KEY=VALUE",
        help="override a config value (repeatable)",
    )


def cmd_prepare(args) -> int:
    from surgvid.dataset import ingest_manifest
    from surgvid.synthetic import write_dataset

    _load_run_config(args)
    manifest = ingest_manifest(args.manifest)
    for line_no, clip_id, message in manifest.rejected:
        print(
            f"rejected line {line_no} ({clip_id or 'unknown clip'}): {message}",
            file=sys.stderr,
        )
    records = manifest.load_records(standardize=True)
    out = pathlib.Path(args.out)
    write_dataset(out, records)
    print(
        f"prepared {len(records)} clips ({len(manifest.rejected)} rejected) "
        f"-> {out}"
    )
    return 0 if records or not manifest.rejected else 1


def cmd_train_codec(args) -> int:
    from surgvid.codec import (
        ConvCodec,
        standardize_latent_scale,
        train_autoencoder,
    )
    from surgvid.dataset import ingest_manifest
    from surgvid.synthetic import codec_training_pool

    cfg = _load_run_config(args)
    records = ingest_manifest(args.data).load_records()
    codec = ConvCodec(
        cfg.codec.temporal_factor,
        cfg.codec.spatial_factor,
        cfg.codec.resolved_latent_channels(),
        cfg.codec.hidden_channels,
        seed=cfg.trainer.seed,
    )
    # The conditioning path encodes trajectory maps and affordance frames
    # with this same codec, so they belong in its training pool.
    pool = codec_training_pool(records, seed=cfg.trainer.seed)
    losses = train_autoencoder(
        pool,
        codec,
        steps=args.steps,
        lr=args.lr,
        seed=cfg.trainer.seed,
    )
    sigma = standardize_latent_scale(codec, [r.frames for r in records])
    codec.save(args.out)
    print(
        f"codec trained: loss {losses[0]:.5f} -> {losses[-1]:.5f} "
        f"(latent std {sigma:.4f} folded), saved {args.out}"
    )
    return 0


def _build_codec(cfg: RunConfig, codec_path: str | None):
    from surgvid.codec import ConvCodec, make_codec

    if codec_path:
        return ConvCodec.load(codec_path)
    return make_codec(cfg.codec, seed=cfg.trainer.seed)


def cmd_train(args) -> int:
    from surgvid.conditioning import TemplateTextEncoder
    from surgvid.dataset import ingest_manifest
    from surgvid.diffusion import save_checkpoint
    from surgvid.pipeline import training_run

    cfg = _load_run_config(args)
    records = ingest_manifest(args.data).load_records()
    if not records:
        print("no training clips", file=sys.stderr)
        return 1
    codec = _build_codec(cfg, args.codec)
    encoder = TemplateTextEncoder(dim=cfg.denoiser.text_dim, seed=cfg.denoiser.seed)

    def log(step, losses):
        print(
            f"step {step}: flow {losses['flow']:.5f} dc {losses['dc']:.5f}",
            file=sys.stderr,
        )

    model, depth_head, _, history = training_run(
        records, cfg, codec, encoder, with_depth=not args.no_depth, log=log
    )
    h, w = records[0].frames.shape[1:3]
    save_checkpoint(
        args.out,
        model,
        depth_head,
        meta={
            "denoiser": dataclasses.asdict(cfg.denoiser),
            "lora": dataclasses.asdict(cfg.lora),
            "latent_channels": codec.latent_channels,
            "codec_backend": codec.backend,
            "codec_factors": [codec.t_f, codec.s_f],
            "resolution": [w, h],
            "frames": records[0].frames.shape[0],
            "config_hash": cfg.hash(),
        },
    )
    print(f"trained {len(history)} steps, final flow {history[-1]['flow']:.5f}")
    return 0


def _load_stack(cfg: RunConfig, ckpt_path: str, codec_path: str | None):
    from surgvid.codec import PatchifyCodec
    from surgvid.conditioning import TemplateTextEncoder
    from surgvid.config import DenoiserConfig, LoraConfig
    from surgvid.denoiser import Denoiser
    from surgvid.diffusion import load_checkpoint
    from surgvid.tensorio import load_tensors

    _, meta = load_tensors(ckpt_path)
    den_cfg = DenoiserConfig(**meta["denoiser"])
    lora_meta = dict(meta["lora"])
    lora_meta["targets"] = tuple(lora_meta["targets"])
    lora_cfg = LoraConfig(**lora_meta)
    if meta["codec_backend"] == "conv":
        if not codec_path:
            raise SystemExit("checkpoint was trained with --codec; pass it")
        codec = _build_codec(cfg, codec_path)
    else:
        t_f, s_f = meta["codec_factors"]
        codec = PatchifyCodec(t_f, s_f)
    model = Denoiser(den_cfg, meta["latent_channels"], lora_cfg=lora_cfg)
    load_checkpoint(ckpt_path, model)
    encoder = TemplateTextEncoder(dim=den_cfg.text_dim, seed=den_cfg.seed)
    return model, codec, encoder, meta


def _read_image(path) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def _read_mask(path) -> np.ndarray:
    from PIL import Image

    return (np.asarray(Image.open(path).convert("L")) > 127).astype(np.float32)


def cmd_generate(args) -> int:
    from PIL import Image

    from surgvid.conditioning import trajectory_from_json
    from surgvid.enums import Action, Tool
    from surgvid.pipeline import conditioning_inputs, generate_video

    cfg = _load_run_config(args)
    if args.from_sim:
        sim = pathlib.Path(args.from_sim)
        traj_file = sim / "trajectory.json"
        ref_file = sim / "reference.png"
        aff_file = sim / "affordance.png"
        meta_file = sim / "request.json"
        request_meta = (
            json.loads(meta_file.read_text()) if meta_file.exists() else {}
        )
        tool = Tool.parse(request_meta.get("tool", args.tool or ""))
        action = Action.parse(request_meta.get("action", args.action or ""))
    else:
        for name in ("traj", "ref", "affordance", "tool", "action"):
            if getattr(args, name) is None:
                print(f"--{name} is required without --from-sim", file=sys.stderr)
                return 2
        traj_file, ref_file, aff_file = args.traj, args.ref, args.affordance
        tool = Tool.parse(args.tool)
        action = Action.parse(args.action)
    trajectory = trajectory_from_json(json.loads(pathlib.Path(traj_file).read_text()))
    ref = _read_image(ref_file)
    affordance = _read_mask(aff_file)
    model, codec, encoder, meta = _load_stack(cfg, args.ckpt, args.codec)
    frames = int(meta.get("frames", cfg.data.frames))
    if trajectory.length != frames:
        print(
            f"trajectory has {trajectory.length} points but the model "
            f"generates {frames} frames; resample it first",
            file=sys.stderr,
        )
        return 1
    bundle = conditioning_inputs(
        ref, affordance, trajectory, tool, action, codec, encoder
    )
    video = generate_video(
        model,
        codec,
        bundle,
        (frames, ref.shape[0], ref.shape[1]),
        cfg.sampler,
    )
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(video):
        arr = (np.clip(frame, 0, 1) * 255.0).round().astype(np.uint8)
        Image.fromarray(arr).save(out / f"frame_{i:04d}.png")
    (out / "metadata.json").write_text(
        json.dumps(
            {
                "tool": tool.value,
                "action": action.value,
                "frames": len(video),
                "sampler_steps": cfg.sampler.steps,
                "guidance_scale": cfg.sampler.guidance_scale,
                "seed": cfg.sampler.seed,
                "config_hash": cfg.hash(),
            },
            indent=2,
        )
    )
    print(f"wrote {len(video)} frames -> {out}")
    return 0


def _load_clip_dir(path) -> dict:
    """Map clip_id -> frames for a directory of .npz clips or PNG subdirs."""
    from surgvid.dataset import load_clip_frames

    path = pathlib.Path(path)
    clips = {}
    for item in sorted(path.iterdir()):
        if item.suffix == ".npz" or item.is_dir():
            frames, _ = load_clip_frames(item)
            clips[item.stem if item.suffix else item.name] = frames
    return clips


def cmd_evaluate(args) -> int:
    from surgvid.metrics import ExternalEmbedder, evaluate_clip_pairs

    cfg = _load_run_config(args)
    real = _load_clip_dir(args.real)
    gen = _load_clip_dir(args.gen)
    shared = sorted(set(real) & set(gen))
    if not shared:
        print("no clip ids shared between --real and --gen", file=sys.stderr)
        return 1
    pairs = [(cid, real[cid], gen[cid]) for cid in shared]
    fvd_embedder = ExternalEmbedder(args.embeddings) if args.embeddings else None
    report = evaluate_clip_pairs(
        pairs, config_hash=cfg.hash(), fvd_embedder=fvd_embedder
    )
    wanted = set(args.metrics.split(",")) if args.metrics else None
    if wanted:
        report.metrics = {
            k: v for k, v in report.metrics.items() if k in wanted
        }
        report.per_clip = {
            k: v for k, v in report.per_clip.items() if k in wanted
        }
    print(report.to_json())
    if args.table:
        print(report.table(), file=sys.stderr)
    return 0


def cmd_augment(args) -> int:
    from PIL import Image

    from surgvid.blend import build_augmentation, load_sprite_library, plan_augmentations
    from surgvid.conditioning import trajectory_to_json
    from surgvid.dataset import ingest_manifest
    from surgvid.enums import Action

    _load_run_config(args)
    sprites = load_sprite_library(args.sprites)
    if not sprites:
        print(f"no sprites found in {args.sprites}", file=sys.stderr)
        return 1
    records = ingest_manifest(args.backgrounds).load_records()
    backgrounds = []
    for rec in records:
        start = rec.trajectory.points[0]
        sprite = next(iter(sprites.values()))
        backgrounds.append(
            {
                "frame": rec.frames[0],
                "affordance": rec.affordance.mask,
                "trajectory": rec.trajectory,
                "position": (
                    int(start.y) - sprite.anchor[1],
                    int(start.x) - sprite.anchor[0],
                ),
            }
        )
    counts = None
    if args.counts:
        counts = {}
        for part in args.counts.split(","):
            name, num = part.split("=")
            counts[Action.parse(name)] = int(num)
    requests = plan_augmentations(backgrounds, sprites, counts)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    limit = args.limit if args.limit else len(requests)
    for i, request in enumerate(requests[:limit]):
        result = build_augmentation(request)
        stem = f"aug_{i:04d}"
        arr = (np.clip(result["frame"], 0, 1) * 255.0).round().astype(np.uint8)
        Image.fromarray(arr).save(out / f"{stem}.png")
        (out / f"{stem}.json").write_text(
            json.dumps(
                {
                    "trajectory": trajectory_to_json(result["trajectory"]),
                    "prompt": result["prompt"].rendered,
                    "anchor": list(result["anchor"]),
                },
                indent=2,
            )
        )
    print(f"planned {len(requests)} requests, composed {min(limit, len(requests))}")
    return 0


def cmd_recognize(args) -> int:
    from surgvid.dataset import ingest_manifest
    from surgvid.recognition import evaluate, save_classifier, train_classifier

    cfg = _load_run_config(args)
    train_records = ingest_manifest(args.train).load_records()
    test_records = ingest_manifest(args.test).load_records()
    synthetic = (
        ingest_manifest(args.synthetic).load_records() if args.synthetic else None
    )
    cfg.recognizer.use_augmented = synthetic is not None
    model, metadata = train_classifier(train_records, cfg.recognizer, synthetic)
    report = evaluate(model, test_records)
    print(report.to_json())
    if args.out:
        save_classifier(args.out, model, metadata)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from surgvid.service import GenerationService, create_app

    cfg = _load_run_config(args)
    model, codec, encoder, meta = _load_stack(cfg, args.ckpt, args.codec)
    w, h = meta["resolution"]
    service = GenerationService(
        model,
        codec,
        encoder,
        resolution=(w, h),
        frames=int(meta.get("frames", cfg.data.frames)),
        sampler=cfg.sampler,
    )
    uvicorn.run(create_app(service), host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="surgvid",
        description="Trajectory-conditioned surgical video generation pipeline",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("prepare", help="validate + standardize a dataset manifest")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train-codec", help="fit the conv autoencoder codec")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.set_defaults(func=cmd_train_codec)

    p = sub.add_parser("train", help="train adapters + depth head")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--codec", help="trained codec weights (conv backend)")
    p.add_argument("--out", required=True)
    p.add_argument("--no-depth", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample a video from sketch inputs")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--codec")
    p.add_argument("--traj", help="trajectory JSON file")
    p.add_argument("--ref", help="reference frame PNG")
    p.add_argument("--affordance", help="affordance mask PNG")
    p.add_argument("--tool")
    p.add_argument("--action")
    p.add_argument("--from-sim", help="directory of simulator-exported inputs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score generated clips against real")
    _add_common(p)
    p.add_argument("--real", required=True)
    p.add_argument("--gen", required=True)
    p.add_argument("--metrics", help="comma list, e.g. psnr,ssim")
    p.add_argument("--embeddings", help="precomputed embedding file for FVD")
    p.add_argument("--table", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("augment", help="compose rare-action starting frames")
    _add_common(p)
    p.add_argument("--backgrounds", required=True, help="dataset manifest")
    p.add_argument("--sprites", required=True, help="sprite library directory")
    p.add_argument("--counts", help="e.g. clipping=110,cutting=177")
    p.add_argument("--limit", type=int, help="compose only the first N")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("recognize", help="train/evaluate the action classifier")
    _add_common(p)
    p.add_argument("--train", required=True, help="train manifest")
    p.add_argument("--test", required=True, help="test manifest")
    p.add_argument("--synthetic", help="augmentation manifest")
    p.add_argument("--out", help="save classifier weights here")
    p.set_defaults(func=cmd_recognize)

    p = sub.add_parser("serve", help="run the HTTP generation service")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--codec")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
