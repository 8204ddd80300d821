"""Flow-matching training and guided Euler sampling.

The probability path is the straight line z_t = (1-t) z_0 + t eps with
velocity target u = eps - z_0; sampling integrates dz/dt = v from t=1 to
t=0 with N uniform Euler steps and classifier-free guidance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from surgvid.conditioning import ConditioningBundle
from surgvid.config import SamplerConfig, TrainerConfig
from surgvid.tensorio import load_tensors, save_tensors


@dataclass(frozen=True)
class FlowSample:
    z_0: torch.Tensor
    eps: torch.Tensor
    t: float
    z_t: torch.Tensor
    u: torch.Tensor


def forward_flow_sample(
    z_0: torch.Tensor, eps: torch.Tensor, t: float
) -> FlowSample:
    """Interpolate clean latent toward noise and record the target velocity."""
    if z_0.shape != eps.shape:
        raise ValueError(
            f"z_0 shape {tuple(z_0.shape)} != eps shape {tuple(eps.shape)}"
        )
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must be in [0,1], got {t}")
    z_t = (1.0 - t) * z_0 + t * eps
    u = eps - z_0
    return FlowSample(z_0=z_0, eps=eps, t=t, z_t=z_t, u=u)


def cfg_velocity(
    v_cond: torch.Tensor, v_uncond: torch.Tensor, scale: float
) -> torch.Tensor:
    """v_uncond + s (v_cond - v_uncond), with the s=1 and s=0 shortcuts exact."""
    if v_cond.shape != v_uncond.shape:
        raise ValueError(
            f"velocity shapes differ: {tuple(v_cond.shape)} vs "
            f"{tuple(v_uncond.shape)}"
        )
    if scale == 1.0:
        return v_cond
    if scale == 0.0:
        return v_uncond
    return v_uncond + scale * (v_cond - v_uncond)


def drop_conditions(
    bundle: ConditioningBundle, p_drop: float, rng: np.random.Generator
) -> ConditioningBundle:
    """One Bernoulli draw nulls text and reference frame jointly.

    Trajectory and affordance are never dropped: they define the action
    being generated, not optional context.
    """
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError(f"p_drop must be in [0,1], got {p_drop}")
    if p_drop > 0.0 and rng.random() < p_drop:
        return bundle.with_nulls(text=True, reference=True)
    return bundle


def null_bundle(bundle: ConditioningBundle) -> ConditioningBundle:
    """The unconditional branch used by guidance: text+reference nulled,
    matching the configuration visited during training dropout."""
    return bundle.with_nulls(text=True, reference=True)


def sample(
    model,
    bundle: ConditioningBundle,
    latent_shape: tuple,
    config: SamplerConfig,
) -> torch.Tensor:
    """Deterministic guided Euler integration from noise to clean latent."""
    if config.steps < 1:
        raise ValueError("sampler needs at least one step")
    gen = torch.Generator().manual_seed(config.seed)
    z = torch.randn(latent_shape, generator=gen)
    uncond = null_bundle(bundle)
    n = config.steps
    dt = 1.0 / n
    t = 1.0
    with torch.no_grad():
        for i in range(n):
            v_c = model(z, t, bundle)
            if config.guidance_scale == 1.0:
                v = v_c
            else:
                v_u = model(z, t, uncond)
                v = cfg_velocity(v_c, v_u, config.guidance_scale)
            z = z - dt * v
            if not torch.isfinite(z).all():
                raise RuntimeError(
                    f"sampling diverged at step {i + 1}/{n} (t={t:.3f})"
                )
            t -= dt
    return z


def training_step(
    batch: list,
    model,
    optimizer,
    lambda_dc: float = 0.0,
    depth_head=None,
    depth_batches: list | None = None,
    smooth_l1_beta: float = 1.0,
    step: int | None = None,
) -> dict:
    """One optimizer step over a batch of (FlowSample, bundle) pairs.

    Flow loss is the global mean of squared velocity residuals over the
    batch. When ``lambda_dc`` > 0 a masked-depth reconstruction term is
    added, computed from the one-step denoised estimate
    z_hat_0 = z_t - t * v_hat of the same forward pass. Returned losses are
    the pre-step values.
    """
    from surgvid.depth import predict_masked_depth, smooth_l1

    use_dc = lambda_dc > 0.0 and depth_head is not None and depth_batches
    flow_count = 0
    dc_terms = []
    flow_terms = []
    for i, (fs, bundle) in enumerate(batch):
        v_hat = model(fs.z_t, fs.t, bundle)
        resid = v_hat - fs.u
        flow_terms.append((resid ** 2).sum())
        flow_count += resid.numel()
        if use_dc:
            z_hat_0 = fs.z_t - fs.t * v_hat
            pred = predict_masked_depth(z_hat_0, depth_batches[i], depth_head)
            target = depth_batches[i].masked_targets()
            dc_terms.append(smooth_l1(pred, target, smooth_l1_beta))
    flow_loss = torch.stack(flow_terms).sum() / flow_count
    dc_loss = (
        torch.stack(dc_terms).mean()
        if dc_terms
        else torch.zeros((), dtype=flow_loss.dtype)
    )
    total = flow_loss + lambda_dc * dc_loss
    if not torch.isfinite(total):
        where = f" at step {step}" if step is not None else ""
        raise RuntimeError(
            f"training diverged{where}: flow={float(flow_loss.detach())} "
            f"dc={float(dc_loss.detach())}"
        )
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return {
        "flow": float(flow_loss.detach()),
        "dc": float(dc_loss.detach()),
        "total": float(total.detach()),
    }


def make_optimizer(params, cfg: TrainerConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        params, lr=cfg.lr, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay
    )


def fit(
    model,
    clip_latents: list,
    cfg: TrainerConfig,
    depth_head=None,
    log=None,
) -> list:
    """Training loop over precomputed per-clip latents.

    ``clip_latents`` entries are dicts with keys ``z_0`` (clean latent
    tokens), ``bundle`` (ConditioningBundle), and optionally
    ``depth_tokens`` (depth latent grid for the consistency loss). The
    whole set is one batch per step; timesteps are stratified across the
    batch each step to keep the loss estimate low-variance.
    """
    from surgvid.depth import DepthLatentBatch, mask_tokens

    params = [p for p in model.trainable_parameters()]
    if depth_head is not None:
        params = params + list(depth_head.parameters())
    optimizer = make_optimizer(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    history = []
    k = len(clip_latents)
    for step in range(cfg.steps):
        batch = []
        depth_batches = []
        order = rng.permutation(k)
        for j, idx in enumerate(order):
            entry = clip_latents[idx]
            t = float((j + rng.random()) / k)
            if cfg.timestep_bias != 1.0:
                t = 1.0 - (1.0 - t) ** cfg.timestep_bias
            eps = torch.randn(entry["z_0"].shape)
            fs = forward_flow_sample(entry["z_0"], eps, t)
            bundle = drop_conditions(
                entry["bundle"], cfg.condition_drop_prob, rng
            )
            batch.append((fs, bundle))
            if depth_head is not None and "depth_tokens" in entry:
                base = DepthLatentBatch(
                    depth_tokens=entry["depth_tokens"],
                    mask_ratio=cfg.depth_mask_ratio,
                )
                depth_batches.append(
                    mask_tokens(
                        base, cfg.depth_mask_ratio,
                        seed=int(rng.integers(2 ** 31)),
                    )
                )
        losses = training_step(
            batch,
            model,
            optimizer,
            lambda_dc=cfg.depth_loss_weight if depth_head is not None else 0.0,
            depth_head=depth_head,
            depth_batches=depth_batches or None,
            smooth_l1_beta=cfg.smooth_l1_beta,
            step=step,
        )
        history.append(losses)
        if log is not None and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log(step, losses)
    return history


# --- checkpoints -------------------------------------------------------------


def checkpoint_tensors(model, depth_head=None) -> dict:
    """Named tensors partitioned into base./lora./depth_head. sections.

    The lora. section carries everything trainable in the denoiser — the
    LoRA residuals and the task modules (conditioning projections, segment
    embeddings, null tokens) that exist only for this fine-tune.
    """
    out = {}
    for name, p in model.named_parameters():
        section = "lora" if p.requires_grad else "base"
        out[f"{section}.{name}"] = p.detach().numpy()
    if depth_head is not None:
        for name, p in depth_head.named_parameters():
            out[f"depth_head.{name}"] = p.detach().numpy()
    return out


def save_checkpoint(path, model, depth_head=None, meta: dict | None = None):
    save_tensors(path, checkpoint_tensors(model, depth_head), meta=meta or {})


def _restore(tensors: dict, key: str, p: torch.Tensor):
    if key not in tensors:
        raise ValueError(f"checkpoint missing tensor {key}")
    stored = tensors[key]
    if tuple(stored.shape) != tuple(p.shape):
        raise ValueError(
            f"checkpoint tensor {key} has shape {tuple(stored.shape)}, "
            f"model expects {tuple(p.shape)}"
        )
    p.copy_(torch.from_numpy(stored))


def load_checkpoint(path, model, depth_head=None) -> dict:
    tensors, meta = load_tensors(path)
    with torch.no_grad():
        for name, p in model.named_parameters():
            section = "lora" if p.requires_grad else "base"
            _restore(tensors, f"{section}.{name}", p)
        if depth_head is not None:
            for name, p in depth_head.named_parameters():
                _restore(tensors, f"depth_head.{name}", p)
    return meta
