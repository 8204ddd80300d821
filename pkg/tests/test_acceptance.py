"""Release gate for the generation stack.

Four layers, cheapest first: closed-form identities the core math must hit
exactly; oracle comparisons against independent dense/spectral solvers;
a desk-scale controllability run that trains the full codec + adapter
stack on moving-dot clips and checks reconstruction, trajectory control,
and depth-free inference; and pipeline-level checks (metrics, splits,
augmentation planning, recognition harness).

The controllability run is the expensive part (tens of CPU-minutes); it
trains once per session and every downstream assertion reads from that one
run.
"""

import dataclasses
import math

import numpy as np
import pytest
import scipy.linalg
import scipy.ndimage
import torch

from conftest import make_bundle
from surgvid.blend import ToolSprite, plan_augmentations, poisson_blend
from surgvid.codec import (
    ConvCodec,
    PatchifyCodec,
    standardize_latent_scale,
    train_autoencoder,
)
from surgvid.conditioning import (
    TemplateTextEncoder,
    TrajectoryPoint,
    TrajectorySequence,
    rasterize_trajectory,
    render_prompt,
)
from surgvid.config import (
    DenoiserConfig,
    LoraConfig,
    RecognizerConfig,
    SamplerConfig,
    TrainerConfig,
)
from surgvid.dataset import partition_by_source, standardize_clip
from surgvid.denoiser import Denoiser
from surgvid.depth import (
    DepthHead,
    DepthLatentBatch,
    gradient_depth_provider,
    mask_tokens,
    predict_masked_depth,
    prepare_depth_latents,
    smooth_l1,
)
from surgvid.diffusion import (
    cfg_velocity,
    fit,
    forward_flow_sample,
    load_checkpoint,
    save_checkpoint,
)
from surgvid.enums import Action, Tool
from surgvid.lora import LoRALinear
from surgvid.metrics import (
    GaussianStats,
    ToyStatsEmbedder,
    compute_fvd,
    fit_stats,
    frechet_distance,
    psnr,
    ssim,
)
from surgvid.pipeline import (
    conditioning_inputs,
    generate_video,
    prepare_clip_latents,
)
from surgvid.recognition import (
    evaluate as evaluate_recognizer,
    report_from_confusion,
    train_classifier,
)
from surgvid.synthetic import (
    DOT_RADIUS,
    codec_training_pool,
    line_path,
    make_integration_set,
    make_moving_dot_clip,
    make_recognition_set,
    trajectory_adherence,
)

# ==============================================================================
# exact identities
# ==============================================================================


def test_flow_interpolation_endpoints():
    gen = torch.Generator().manual_seed(0)
    z_0 = torch.randn(4, 3, 5, generator=gen)
    eps = torch.randn(4, 3, 5, generator=gen)
    at_data = forward_flow_sample(z_0, eps, 0.0)
    assert torch.equal(at_data.z_t, z_0)
    at_noise = forward_flow_sample(z_0, eps, 1.0)
    assert torch.equal(at_noise.z_t, eps)
    assert torch.equal(at_data.u, eps - z_0)
    assert torch.equal(at_noise.u, eps - z_0)


def test_guidance_scale_shortcuts():
    gen = torch.Generator().manual_seed(1)
    v_c = torch.randn(2, 3, generator=gen)
    v_u = torch.randn(2, 3, generator=gen)
    assert cfg_velocity(v_c, v_u, 1.0) is v_c
    assert cfg_velocity(v_c, v_u, 0.0) is v_u
    torch.testing.assert_close(
        cfg_velocity(v_c, v_u, 2.0), v_u + 2.0 * (v_c - v_u)
    )


def test_lora_zero_init_and_merge_equivalence():
    torch.manual_seed(2)
    base = torch.nn.Linear(16, 12)
    adapted = LoRALinear(base, rank=4, alpha=8.0)
    x = torch.randn(5, 16)
    assert torch.equal(adapted(x), base(x))  # B = 0 at init
    with torch.no_grad():
        adapted.lora_b.normal_(std=0.3)
    merged = x @ adapted.merged_weight().T + base.bias
    torch.testing.assert_close(adapted(x), merged, atol=1e-5, rtol=0)


def test_smooth_l1_reference_values():
    zero = torch.zeros(1)
    assert smooth_l1(zero, zero, beta=1.0).item() == 0.0
    # |d| = 0.5 inside the quadratic zone: 0.5 * 0.25 / 1
    assert smooth_l1(torch.tensor([0.5]), zero, beta=1.0).item() == 0.125
    # |d| = 2 in the linear zone: 2 - 0.5
    assert smooth_l1(torch.tensor([2.0]), zero, beta=1.0).item() == 1.5


def test_psnr_reference_value():
    # MSE exactly 1 against a 255 peak: 20 log10(255) = 48.1308 dB
    a = np.zeros((8, 8), dtype=np.float64)
    b = np.ones((8, 8), dtype=np.float64)
    assert abs(psnr(a, b, peak=255.0) - 48.1308) <= 1e-3


def test_ssim_self_identity():
    image = np.random.default_rng(3).random((16, 16))
    assert ssim(image, image) == 1.0


def test_frechet_identity_and_unit_shift():
    stats = fit_stats(np.random.default_rng(4).random((8, 3)))
    assert frechet_distance(stats, stats) == 0.0
    x = np.array([[0.0], [1.0], [2.0], [3.0]])
    shifted = fit_stats(x + 1.0)
    assert abs(frechet_distance(fit_stats(x), shifted) - 1.0) < 1e-9


def test_patchify_round_trip_bit_exact():
    codec = PatchifyCodec(2, 4)
    video = np.random.default_rng(5).random((9, 8, 16, 3)).astype(np.float32)
    out = codec.decode(codec.encode(video))
    np.testing.assert_array_equal(out, video)


def test_standardize_pad_and_truncate_bit_exact():
    rng = np.random.default_rng(6)
    long = rng.random((100, 4, 4, 3)).astype(np.float32)
    np.testing.assert_array_equal(standardize_clip(long, 25.0), long[:81])
    short = rng.random((60, 4, 4, 3)).astype(np.float32)
    out = standardize_clip(short, 25.0)
    np.testing.assert_array_equal(out[:60], short)
    np.testing.assert_array_equal(
        out[60:], np.broadcast_to(short[-1], (21, 4, 4, 3))
    )


def test_prompt_renders_exact_template():
    assert render_prompt(Tool.GRASPER, Action.GRASPING) == (
        "A robotic da Vinci grasper performs grasping during a "
        "cholecystectomy. The laparoscopic camera view shows the grasper "
        "within the abdominal cavity. The grasper moves precisely as it "
        "executes the grasping motion."
    )
    assert render_prompt(Tool.CLIPPER, Action.CLIPPING) == (
        "A robotic da Vinci clipper performs clipping during a "
        "cholecystectomy. The laparoscopic camera view shows the clipper "
        "within the abdominal cavity. The clipper moves precisely as it "
        "executes the clipping motion."
    )


# ==============================================================================
# oracle comparisons
# ==============================================================================


def _dense_poisson(source, target, mask, offset=(0, 0)):
    """Assemble the masked Laplacian system and solve it densely."""
    mask = mask != 0
    ys, xs = np.nonzero(mask)
    dy, dx = offset
    ty, tx = ys + dy, xs + dx
    n = len(ys)
    index = {(py, px): i for i, (py, px) in enumerate(zip(ty, tx))}
    pad = np.pad(source, 1, mode="edge")
    a = np.zeros((n, n))
    b = np.zeros(n)
    for i in range(n):
        a[i, i] = 4.0
        for oy, ox in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            b[i] += pad[ys[i] + 1, xs[i] + 1] - pad[ys[i] + 1 + oy, xs[i] + 1 + ox]
            q = (ty[i] + oy, tx[i] + ox)
            if q in index:
                a[i, index[q]] = -1.0
            else:
                b[i] += target[q]
    out = target.astype(np.float64).copy()
    out[ty, tx] = np.linalg.solve(a, b)
    return out


@pytest.mark.parametrize("size,offset", [(8, (0, 0)), (16, (2, 1)), (32, (0, 3))])
def test_poisson_blend_matches_dense_solve(size, offset):
    rng = np.random.default_rng(size)
    source = scipy.ndimage.gaussian_filter(rng.random((size, size)), 1.5)
    target = scipy.ndimage.gaussian_filter(rng.random((size, size)), 1.5)
    ys, xs = np.mgrid[0:size, 0:size]
    c = size // 2 - 1
    mask = (ys - c) ** 2 + (xs - c) ** 2 <= (size // 4) ** 2
    blended = poisson_blend(source, target, mask, offset=offset)
    oracle = _dense_poisson(source, target, mask, offset=offset)
    assert np.abs(blended - oracle).max() <= 1e-3


def test_frechet_matches_direct_sqrtm_oracle():
    # covariances that do not commute, so the PSD-sandwich shortcut has to
    # agree with the literal Tr sqrt(S1 S2) evaluation
    s1 = GaussianStats(
        mean=np.array([0.0, 0.0]),
        cov=np.array([[2.0, 0.5], [0.5, 1.0]]),
        count=10,
    )
    s2 = GaussianStats(
        mean=np.array([1.0, -1.0]),
        cov=np.array([[1.0, -0.3], [-0.3, 1.5]]),
        count=10,
    )
    assert not np.allclose(s1.cov @ s2.cov, s2.cov @ s1.cov)
    root = scipy.linalg.sqrtm(s1.cov @ s2.cov)
    oracle = float(
        np.sum((s1.mean - s2.mean) ** 2)
        + np.trace(s1.cov + s2.cov - 2.0 * np.real(root))
    )
    assert abs(frechet_distance(s1, s2) - oracle) <= 1e-6


@pytest.mark.parametrize("radius", range(1, 9))
def test_trajectory_disks_match_enumeration(radius):
    size = 2 * radius + 5
    cx, cy = float(size // 2), float(size // 2 - 1)
    traj = TrajectorySequence(
        points=(TrajectoryPoint(frame=0, x=cx, y=cy),),
        tool_class=0,
        length=1,
        canvas=(size, size),
    )
    stack = rasterize_trajectory(traj, size, size, radius=radius)
    rendered = {
        (y, x) for y, x in zip(*np.nonzero(stack.maps[0, :, :, 2]))
    }
    brute = {
        (y, x)
        for y in range(size)
        for x in range(size)
        if (x - cx) ** 2 + (y - cy) ** 2 <= radius ** 2
    }
    assert rendered == brute


def test_total_loss_gradients_match_finite_differences():
    codec = PatchifyCodec(1, 1)
    encoder = TemplateTextEncoder(dim=8, seed=0)
    cfg = DenoiserConfig(
        token_dim=8, depth=1, heads=1, ff_mult=2, text_dim=8, seed=0
    )
    model = Denoiser(
        cfg, codec.latent_channels, lora_cfg=LoraConfig(rank=1, alpha=2.0)
    )
    head = DepthHead(codec.latent_channels, dim=8, seed=1)
    bundle, z_0, video = make_bundle(codec, encoder, t=3, h=4, w=4, seed=0)
    model.double()
    head.double()
    bundle = dataclasses.replace(
        bundle,
        z_a=bundle.z_a.double(),
        z_f=bundle.z_f.double(),
        z_gamma=bundle.z_gamma.double(),
        z_p=bundle.z_p.double(),
    )
    gen = torch.Generator().manual_seed(0)
    eps = torch.randn(z_0.shape, generator=gen, dtype=torch.float64)
    fs = forward_flow_sample(z_0.double(), eps, 0.37)
    depth = gradient_depth_provider(video)
    tokens = prepare_depth_latents(depth, codec).depth_tokens.double()
    batch = mask_tokens(
        DepthLatentBatch(depth_tokens=tokens), mask_ratio=0.5, seed=3
    )

    def total_loss():
        v_hat = model(fs.z_t, fs.t, bundle)
        flow = ((v_hat - fs.u) ** 2).mean()
        z_hat_0 = fs.z_t - fs.t * v_hat
        pred = predict_masked_depth(z_hat_0, batch, head)
        return flow + 0.1 * smooth_l1(pred, batch.masked_targets(), 1.0)

    params = model.trainable_parameters() + list(head.parameters())
    loss = total_loss()
    # null-condition tokens sit out unless their signal is dropped; their
    # gradient through this fully conditioned loss is zero
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [
        g if g is not None else torch.zeros_like(p)
        for p, g in zip(params, grads)
    ]
    rng = np.random.default_rng(0)
    step = 1e-6
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        picks = rng.choice(
            flat.numel(), size=min(10, flat.numel()), replace=False
        )
        for i in picks:
            with torch.no_grad():
                keep = flat[i].item()
                flat[i] = keep + step
                up = total_loss().item()
                flat[i] = keep - step
                down = total_loss().item()
                flat[i] = keep
            fd = (up - down) / (2 * step)
            analytic = g.reshape(-1)[i].item()
            assert abs(fd - analytic) <= max(1e-3 * abs(analytic), 1e-9)


def test_depth_head_blind_to_unmasked_depth_values():
    gen = torch.Generator().manual_seed(7)
    tokens = torch.randn(3, 2, 2, 12, generator=gen)
    batch = mask_tokens(
        DepthLatentBatch(depth_tokens=tokens), mask_ratio=0.5, seed=7
    )
    rgb = torch.randn(3, 2, 2, 12, generator=gen)
    head = DepthHead(12, dim=8, seed=0)
    with torch.no_grad():
        pred = predict_masked_depth(rgb, batch, head)
        loss = smooth_l1(pred, batch.masked_targets(), 1.0)
        # scramble every token the head is NOT asked to reconstruct
        flat = tokens.reshape(batch.token_count, -1).clone()
        unmasked = np.setdiff1d(
            np.arange(batch.token_count), batch.masked_index_set
        )
        flat[unmasked] = flat[np.roll(unmasked, 1)]
        scrambled = dataclasses.replace(
            batch, depth_tokens=flat.reshape(tokens.shape)
        )
        pred2 = predict_masked_depth(rgb, scrambled, head)
        loss2 = smooth_l1(pred2, scrambled.masked_targets(), 1.0)
    assert torch.equal(pred, pred2)
    assert torch.equal(loss, loss2)


# ==============================================================================
# controllability run (codec + adapters overfit on moving-dot clips)
# ==============================================================================

CODEC_LEGS = ((3000, 1e-3, 0), (1500, 5e-4, 1))  # (steps, lr, seed)
DIFFUSION_LEGS = (1000, 500, 500)
GUIDANCE_SCALE = 1.0
CONTROL_TOLERANCE = DOT_RADIUS + 2


@pytest.fixture(scope="session")
def controllability_run():
    train, heldout = make_integration_set()
    codec = ConvCodec(8, 8, latent_channels=96, hidden_channels=128, seed=0)
    pool = codec_training_pool(train)
    for steps, lr, seed in CODEC_LEGS:
        train_autoencoder(pool, codec, steps=steps, lr=lr, seed=seed)
    standardize_latent_scale(codec, [rec.frames for rec in train])

    encoder = TemplateTextEncoder(dim=64, seed=0)
    cfg = DenoiserConfig(
        token_dim=96, depth=1, heads=2, ff_mult=4, text_dim=64, seed=0
    )
    model = Denoiser(
        cfg, codec.latent_channels, lora_cfg=LoraConfig(rank=32, alpha=64.0)
    )
    head = DepthHead(codec.latent_channels, dim=64, seed=0)
    entries = prepare_clip_latents(train, codec, encoder, with_depth=True)
    history = []
    for leg, steps in enumerate(DIFFUSION_LEGS):
        trainer = TrainerConfig(
            steps=steps,
            lr=1e-3,
            condition_drop_prob=0.2,
            depth_loss_weight=0.1,
            seed=leg,
            log_every=10 ** 9,
        )
        history += fit(model, entries, trainer, depth_head=head)
    model.eval()

    sampler = SamplerConfig(steps=50, guidance_scale=GUIDANCE_SCALE, seed=0)
    videos = {}
    for rec in train + [heldout]:
        bundle = conditioning_inputs(
            rec.frames[0], rec.affordance.mask, rec.trajectory,
            rec.tool, rec.action, codec, encoder,
        )
        videos[rec.clip_id] = generate_video(
            model, codec, bundle, rec.frames.shape[:3], sampler
        )
    return {
        "train": train,
        "heldout": heldout,
        "codec": codec,
        "model": model,
        "head": head,
        "encoder": encoder,
        "history": history,
        "videos": videos,
        "sampler": sampler,
    }


@pytest.mark.slow
def test_codec_round_trip_quality(controllability_run):
    run = controllability_run
    codec = run["codec"]
    for rec in run["train"]:
        decoded = np.clip(codec.decode(codec.encode(rec.frames)), 0.0, 1.0)
        assert psnr(rec.frames, decoded) >= 28.0, rec.clip_id


@pytest.mark.slow
def test_overfit_reconstruction_quality(controllability_run):
    run = controllability_run
    for rec in run["train"]:
        value = psnr(rec.frames, run["videos"][rec.clip_id])
        assert value >= 25.0, f"{rec.clip_id}: {value:.2f} dB"


@pytest.mark.slow
def test_trajectory_control_including_heldout(controllability_run):
    run = controllability_run
    for rec in run["train"] + [run["heldout"]]:
        video = run["videos"][rec.clip_id]
        adherence = trajectory_adherence(
            video, rec.trajectory, CONTROL_TOLERANCE
        )
        assert adherence >= 0.90, f"{rec.clip_id}: {adherence:.3f}"


@pytest.mark.slow
def test_sampling_identical_without_depth_head(controllability_run, tmp_path):
    # a checkpoint that drops the depth head entirely must reproduce
    # inference bit-for-bit: the head exists only to shape training
    run = controllability_run
    rec = run["train"][0]
    bundle = conditioning_inputs(
        rec.frames[0], rec.affordance.mask, rec.trajectory,
        rec.tool, rec.action, run["codec"], run["encoder"],
    )
    shape = rec.frames.shape[:3]
    with_head = generate_video(
        run["model"], run["codec"], bundle, shape, run["sampler"]
    )

    path = tmp_path / "headless.npz"
    save_checkpoint(path, run["model"], depth_head=None)
    cfg = DenoiserConfig(
        token_dim=96, depth=1, heads=2, ff_mult=4, text_dim=64, seed=0
    )
    reloaded = Denoiser(
        cfg, run["codec"].latent_channels,
        lora_cfg=LoraConfig(rank=32, alpha=64.0),
    )
    load_checkpoint(path, reloaded, depth_head=None)
    reloaded.eval()
    without_head = generate_video(
        reloaded, run["codec"], bundle, shape, run["sampler"]
    )
    np.testing.assert_array_equal(with_head, without_head)


# ==============================================================================
# training dynamics
# ==============================================================================


@pytest.mark.slow
def test_flow_loss_decreases_over_early_training(controllability_run):
    flow = np.array(
        [entry["flow"] for entry in controllability_run["history"][:200]]
    )
    # Smooth at window 20 and compare the curve at that resolution:
    # per-step diffs of a length-20 moving average reduce to raw lag-20
    # comparisons, which condition dropout makes a coin flip.
    window = 20
    means = flow.reshape(-1, window).mean(axis=1)
    assert np.all(np.diff(means) < 0)


def test_depth_weight_changes_losses_but_not_samples():
    codec = PatchifyCodec(2, 2)
    encoder = TemplateTextEncoder(dim=16, seed=0)
    cfg = DenoiserConfig(
        token_dim=32, depth=1, heads=2, ff_mult=2, text_dim=16, seed=0
    )

    def fresh_model():
        return Denoiser(
            cfg, codec.latent_channels, lora_cfg=LoraConfig(rank=2, alpha=4.0)
        )

    bundle, z_0, video = make_bundle(codec, encoder, t=5, h=8, w=8, seed=0)
    depth = gradient_depth_provider(video)
    tokens = prepare_depth_latents(depth, codec).depth_tokens.to(torch.float32)
    entry = {"z_0": z_0, "bundle": bundle, "depth_tokens": tokens}
    trainer = TrainerConfig(
        steps=4, lr=1e-3, condition_drop_prob=0.0,
        depth_loss_weight=0.1, seed=0, log_every=10 ** 9,
    )

    model_plain = fresh_model()
    history_plain = fit(model_plain, [entry], trainer, depth_head=None)
    model_depth = fresh_model()
    head = DepthHead(codec.latent_channels, dim=16, seed=0)
    history_depth = fit(model_depth, [entry], trainer, depth_head=head)

    assert all(step["dc"] == 0.0 for step in history_plain)
    assert any(step["dc"] > 0.0 for step in history_depth)
    assert any(
        a["total"] != b["total"]
        for a, b in zip(history_plain, history_depth)
    )

    # at fixed weights the sampler never sees the head: outputs identical
    sampler = SamplerConfig(steps=3, guidance_scale=1.0, seed=0)
    model_depth.eval()
    first = generate_video(model_depth, codec, bundle, video.shape[:3], sampler)
    del head
    second = generate_video(model_depth, codec, bundle, video.shape[:3], sampler)
    np.testing.assert_array_equal(first, second)


# ==============================================================================
# pipeline checks
# ==============================================================================


def test_fvd_zero_on_identical_clip_sets():
    rng = np.random.default_rng(9)
    clips = [rng.random((4, 6, 6, 3)).astype(np.float32) for _ in range(4)]
    assert abs(compute_fvd(clips, clips, ToyStatsEmbedder())) <= 1e-6


def test_partition_keeps_sources_disjoint():
    records = [
        make_moving_dot_clip(
            f"clip{i}", f"source{i % 5}", Action.GRASPING, Tool.GRASPER,
            line_path((4, 4), (12, 12)), width=16, height=16, frames=5,
            dot_radius=2,
        )
        for i in range(10)
    ]
    train, test = partition_by_source(records, {"source1", "source3"})
    train_sources = {r.source_video_id for r in train}
    test_sources = {r.source_video_id for r in test}
    assert not train_sources & test_sources
    assert test_sources == {"source1", "source3"}
    assert len(train) == 6 and len(test) == 4
    assert all(r.split == "train" for r in train)
    assert all(r.split == "test" for r in test)


def test_augmentation_plan_default_counts():
    sprite_rgb = np.zeros((5, 5, 3), dtype=np.float32)
    sprite_rgb[1:4, 1:4] = 0.8
    sprite_mask = np.zeros((5, 5), dtype=np.uint8)
    sprite_mask[1:4, 1:4] = 1
    sprites = {
        tool: ToolSprite(
            rgb=sprite_rgb, mask=sprite_mask, anchor=(2, 2), tool=tool
        )
        for tool in (Tool.CLIPPER, Tool.SCISSORS)
    }
    traj = TrajectorySequence(
        points=(TrajectoryPoint(frame=0, x=8.0, y=8.0),),
        tool_class=0, length=1, canvas=(24, 24),
    )
    backgrounds = [
        {
            "frame": np.full((24, 24, 3), 0.4, dtype=np.float32),
            "affordance": np.zeros((24, 24), dtype=np.uint8),
            "trajectory": traj,
            "position": (6, 6),
        }
        for _ in range(2)
    ]
    requests = plan_augmentations(backgrounds, sprites)
    assert len(requests) == 287
    by_action = {}
    for request in requests:
        by_action[request.action] = by_action.get(request.action, 0) + 1
    assert by_action == {Action.CLIPPING: 110, Action.CUTTING: 177}


def test_recognition_overfits_and_degenerate_report_is_finite():
    records = make_recognition_set(per_class=2)
    cfg = RecognizerConfig(channels=16, lr=5e-3, steps=500, seed=0)
    model, metadata = train_classifier(records, cfg)
    assert metadata["warnings"] == []
    report = evaluate_recognizer(model, records)
    confusion = np.asarray(report.confusion)
    assert confusion.trace() == confusion.sum() == len(records)

    # a class that is never predicted and never correct: all-zero row/column
    degenerate = np.zeros((4, 4), dtype=np.int64)
    degenerate[0, 0] = degenerate[1, 1] = 3
    degenerate[3, 1] = 2  # dissecting always misread, never predicted
    report = report_from_confusion(degenerate)
    for table in (report.precision, report.recall, report.f1):
        for value in table.values():
            assert math.isfinite(value)
    assert report.precision[Action.DISSECTING.value] == 0.0
    assert report.recall[Action.DISSECTING.value] == 0.0
    assert report.f1[Action.DISSECTING.value] == 0.0
