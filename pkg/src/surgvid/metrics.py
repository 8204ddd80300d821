"""Evaluation metrics: PSNR, SSIM, Fréchet video distance, perceptual distance.

Distribution-level metrics (FVD and its content-debiased variant) share one
Fréchet core over pluggable clip embedders; pretrained video networks are
out of scope, so besides the built-in toy embedder there is an ingestion
path for precomputed embedding files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.signal

from surgvid.tensorio import load_tensors, save_tensors

PSNR_CAP_DB = 100.0


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical inputs hit the 100 dB cap."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(peak * peak / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2 * sigma * sigma))
    window = np.outer(g, g)
    return window / window.sum()


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    dynamic_range: float = 1.0,
    k1: float = 0.01,
    k2: float = 0.03,
    window: int = 11,
    sigma: float = 1.5,
) -> float:
    """Mean local SSIM with an 11x11 Gaussian window (valid region only).

    Color images are scored per channel and averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        return float(
            np.mean([
                ssim(a[..., c], b[..., c], dynamic_range, k1, k2, window, sigma)
                for c in range(a.shape[-1])
            ])
        )
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(
            f"image {a.shape} smaller than the {window}x{window} window"
        )
    w = _gaussian_window(window, sigma)
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2

    def filt(x):
        return scipy.signal.convolve2d(x, w, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def video_ssim(a: np.ndarray, b: np.ndarray, dynamic_range: float = 1.0) -> float:
    """Frame-wise SSIM averaged over a clip."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean([
        ssim(fa, fb, dynamic_range) for fa, fb in zip(a, b)
    ]))


# --- Fréchet machinery --------------------------------------------------------


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        if self.count < 2:
            raise ValueError("need at least 2 samples for covariance")
        if not np.allclose(self.cov, self.cov.T, atol=1e-8):
            raise ValueError("covariance must be symmetric")


def fit_stats(embeddings: np.ndarray) -> GaussianStats:
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[0] < 2:
        raise ValueError(
            f"need an (n>=2, d) embedding matrix, got {embeddings.shape}"
        )
    mean = embeddings.mean(axis=0)
    cov = np.cov(embeddings, rowvar=False)
    cov = np.atleast_2d(cov)
    cov = 0.5 * (cov + cov.T)
    return GaussianStats(mean=mean, cov=cov, count=embeddings.shape[0])


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    """Matrix square root by eigendecomposition with negative clamping."""
    sym = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(sym)
    vals = np.where(vals < -1e-10, 0.0, np.maximum(vals, 0.0))
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(s1: GaussianStats, s2: GaussianStats) -> float:
    """||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}), clamped at zero."""
    if s1.mean.shape != s2.mean.shape:
        raise ValueError(
            f"dimension mismatch: {s1.mean.shape} vs {s2.mean.shape}"
        )
    root1 = _psd_sqrt(s1.cov)
    inner = _psd_sqrt(root1 @ s2.cov @ root1)
    mean_term = float(np.sum((s1.mean - s2.mean) ** 2))
    trace_term = float(
        np.trace(s1.cov) + np.trace(s2.cov) - 2.0 * np.trace(inner)
    )
    return max(0.0, mean_term + trace_term)


class ToyStatsEmbedder:
    """Deterministic 2-D clip embedding: mean pixel, temporal-change energy."""

    embedder_id = "toy-stats"
    dim = 2

    def __call__(self, clip) -> np.ndarray:
        frames = np.asarray(getattr(clip, "frames", clip), dtype=np.float64)
        mean_pixel = frames.mean()
        if frames.shape[0] > 1:
            tdiff = float(np.mean((frames[1:] - frames[:-1]) ** 2))
        else:
            tdiff = 0.0
        return np.array([mean_pixel, tdiff])


class ExternalEmbedder:
    """Looks up precomputed per-clip vectors saved by an external network."""

    def __init__(self, path):
        tensors, meta = load_tensors(path)
        self.vectors = {k: v.astype(np.float64) for k, v in tensors.items()}
        self.embedder_id = meta.get("embedder_id", "external")
        self.dim = int(meta.get("dim", next(iter(self.vectors.values())).size))

    def __call__(self, clip) -> np.ndarray:
        clip_id = clip if isinstance(clip, str) else getattr(clip, "clip_id", None)
        if clip_id is None or clip_id not in self.vectors:
            raise ValueError(
                f"no precomputed embedding for clip {clip_id!r} "
                f"(embedder {self.embedder_id})"
            )
        return self.vectors[clip_id]


def save_embeddings(path, vectors: dict, embedder_id: str) -> None:
    dims = {v.size for v in vectors.values()}
    if len(dims) > 1:
        raise ValueError(f"inconsistent embedding dims: {sorted(dims)}")
    save_tensors(
        path,
        {k: np.asarray(v, dtype=np.float32) for k, v in vectors.items()},
        meta={"embedder_id": embedder_id, "dim": dims.pop() if dims else 0},
    )


def compute_fvd(real_clips: list, generated_clips: list, embedder) -> float:
    """Fréchet distance between embedded clip sets (the FVD recipe).

    The content-debiased variant is the same computation with a temporally
    sensitive embedder plugged in.
    """
    if len(real_clips) < 2 or len(generated_clips) < 2:
        raise ValueError(
            "need at least 2 clips per side to fit covariance "
            f"(got {len(real_clips)} real, {len(generated_clips)} generated)"
        )
    real = np.stack([embedder(c) for c in real_clips])
    gen = np.stack([embedder(c) for c in generated_clips])
    return frechet_distance(fit_stats(real), fit_stats(gen))


# --- perceptual distance ------------------------------------------------------


class IdentityEmbedder:
    """Single-layer embedder whose features are the raw pixels.

    Under the perceptual-distance formula this reduces to plain MSE, which
    pins the interface down until real perceptual weights are plugged in.
    """

    embedder_id = "identity"
    layer_weights = (1.0,)

    def features(self, image) -> list:
        return [np.asarray(image, dtype=np.float64)]


def perceptual_distance(a, b, embedder) -> float:
    """Weighted sum of per-layer mean squared feature differences."""
    fa = embedder.features(a)
    fb = embedder.features(b)
    weights = embedder.layer_weights
    if len(fa) != len(fb) or len(fa) != len(weights):
        raise ValueError(
            f"embedder mismatch: {len(fa)} vs {len(fb)} layers, "
            f"{len(weights)} weights"
        )
    total = 0.0
    for w, xa, xb in zip(weights, fa, fb):
        if xa.shape != xb.shape:
            raise ValueError(
                f"embedder mismatch: layer shapes {xa.shape} vs {xb.shape}"
            )
        total += w * float(np.mean((xa - xb) ** 2))
    return total


# --- report -------------------------------------------------------------------

TABLE_ORDER = ("fvd", "cd_fvd", "ssim", "psnr", "lpips")
FRAME_LEVEL = ("ssim", "psnr", "lpips")


@dataclass
class MetricsReport:
    metrics: dict = field(default_factory=dict)       # name -> aggregate
    per_clip: dict = field(default_factory=dict)      # name -> {clip_id: value}
    config_hash: str = ""

    def to_json(self) -> str:
        return json.dumps(
            {
                "metrics": self.metrics,
                "per_clip": self.per_clip,
                "config_hash": self.config_hash,
            },
            indent=2,
            sort_keys=True,
        )

    def table(self) -> str:
        names = [n for n in TABLE_ORDER if n in self.metrics]
        extra = [n for n in self.metrics if n not in TABLE_ORDER]
        names += sorted(extra)
        header = " | ".join(f"{n.upper():>8}" for n in names)
        rule = "-+-".join("-" * 8 for _ in names)
        row = " | ".join(f"{self.metrics[n]:8.4f}" for n in names)
        return "\n".join([header, rule, row])


def evaluate_clip_pairs(
    pairs: list,
    config_hash: str = "",
    fvd_embedder=None,
    cd_fvd_embedder=None,
    perceptual_embedder=None,
) -> MetricsReport:
    """Score (clip_id, real, generated) pairs with the full metric table.

    Frame-level metrics aggregate as the mean of per-clip values; the
    Fréchet metrics are set statistics over both sides.
    """
    report = MetricsReport(config_hash=config_hash)
    percep = perceptual_embedder or IdentityEmbedder()
    per_psnr, per_ssim, per_lpips = {}, {}, {}
    for clip_id, real, gen in pairs:
        per_psnr[clip_id] = psnr(real, gen, peak=1.0)
        per_ssim[clip_id] = video_ssim(real, gen)
        per_lpips[clip_id] = perceptual_distance(real, gen, percep)
    report.per_clip = {
        "psnr": per_psnr, "ssim": per_ssim, "lpips": per_lpips,
    }
    report.metrics = {
        name: float(np.mean(list(values.values())))
        for name, values in report.per_clip.items()
    }
    if len(pairs) >= 2:
        reals = [real for _, real, _ in pairs]
        gens = [gen for _, _, gen in pairs]
        fvd_emb = fvd_embedder or ToyStatsEmbedder()
        report.metrics["fvd"] = compute_fvd(reals, gens, fvd_emb)
        if cd_fvd_embedder is not None:
            report.metrics["cd_fvd"] = compute_fvd(reals, gens, cd_fvd_embedder)
        else:
            report.metrics["cd_fvd"] = report.metrics["fvd"]
    return report
