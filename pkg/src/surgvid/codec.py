"""Video <-> latent codecs.

Two interchangeable backends behind one interface:

* ``PatchifyCodec`` — an exact bijection: causal temporal grouping (first
  frame alone, then groups of ``t_f``), space-to-depth by ``s_f``, and a
  fixed -0.5 centering shift. Lossless, linear, the test oracle.
* ``ConvCodec`` — a small strided conv autoencoder with the same token
  grid, trained per dataset. Deterministic (no sampling), decode clamps
  to [0, 1].

Videos are numpy ``T x H x W x 3`` float32 in [0, 1]; tokens are torch
``T' x H' x W' x C`` float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from surgvid.config import CodecConfig
from surgvid.tensorio import load_tensors, save_tensors


@dataclass
class LatentVideo:
    tokens: torch.Tensor          # T' x H' x W' x C
    factors: tuple                # (t_f, s_f)
    source_shape: tuple           # (T, H, W)

    @property
    def grid(self) -> tuple:
        return tuple(self.tokens.shape[:3])

    @property
    def channels(self) -> int:
        return int(self.tokens.shape[-1])


def latent_grid(t: int, h: int, w: int, t_f: int, s_f: int) -> tuple:
    """Token-grid shape for a valid video shape; raises on indivisibility."""
    if t < 1:
        raise ValueError("empty clip")
    if (t - 1) % t_f:
        raise ValueError(
            f"frame count {t} invalid: (T-1) must be divisible by "
            f"temporal factor {t_f}"
        )
    if h % s_f or w % s_f:
        raise ValueError(
            f"resolution {w}x{h} must be divisible by spatial factor {s_f}"
        )
    return (1 + (t - 1) // t_f, h // s_f, w // s_f, 3 * t_f * s_f * s_f)


def _check_video(video: np.ndarray) -> np.ndarray:
    video = np.asarray(video, dtype=np.float32)
    if video.ndim != 4 or video.shape[-1] != 3:
        raise ValueError(f"video must be TxHxWx3, got shape {video.shape}")
    return video


def _space_to_depth(x: torch.Tensor, s: int) -> torch.Tensor:
    # g x H x W x c -> g x H/s x W/s x (s*s*c)
    g, h, w, c = x.shape
    x = x.reshape(g, h // s, s, w // s, s, c)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(g, h // s, w // s, s * s * c)


def _depth_to_space(x: torch.Tensor, s: int, c: int) -> torch.Tensor:
    g, hh, ww, _ = x.shape
    x = x.reshape(g, hh, ww, s, s, c)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(g, hh * s, ww * s, c)


class PatchifyCodec:
    """Lossless rearrangement codec (the oracle backend)."""

    backend = "patchify"

    def __init__(self, temporal_factor: int = 2, spatial_factor: int = 4):
        self.t_f = temporal_factor
        self.s_f = spatial_factor
        self.latent_channels = 3 * self.t_f * self.s_f ** 2

    def encode(self, video: np.ndarray) -> LatentVideo:
        video = _check_video(video)
        t, h, w, _ = video.shape
        t_lat, h_lat, w_lat, c_lat = latent_grid(t, h, w, self.t_f, self.s_f)
        # The centering shift is computed in float64: float32 cannot hold
        # x - 0.5 exactly for small x, and this backend must be a bijection.
        x = torch.from_numpy(video.astype(np.float64)) - 0.5
        first = _space_to_depth(x[:1], self.s_f)            # 1 x H' x W' x 3s²
        pad = c_lat - first.shape[-1]
        first = torch.nn.functional.pad(first, (0, pad))
        if t > 1:
            body = x[1:].reshape(t_lat - 1, self.t_f, h, w, 3)
            body = body.permute(0, 2, 3, 1, 4).reshape(t_lat - 1, h, w, -1)
            body = _space_to_depth(body, self.s_f)
            tokens = torch.cat([first, body], dim=0)
        else:
            tokens = first
        return LatentVideo(
            tokens=tokens, factors=(self.t_f, self.s_f), source_shape=(t, h, w)
        )

    def decode(self, latent: LatentVideo) -> np.ndarray:
        t, h, w = latent.source_shape
        t_lat, h_lat, w_lat, c_lat = latent_grid(t, h, w, self.t_f, self.s_f)
        if tuple(latent.tokens.shape) != (t_lat, h_lat, w_lat, c_lat):
            raise ValueError(
                f"latent shape {tuple(latent.tokens.shape)} inconsistent with "
                f"source {latent.source_shape} at factors "
                f"({self.t_f}, {self.s_f})"
            )
        tokens = latent.tokens.detach().to(torch.float64)
        first = tokens[:1, ..., : 3 * self.s_f ** 2]
        frame0 = _depth_to_space(first, self.s_f, 3)
        if t > 1:
            body = _depth_to_space(tokens[1:], self.s_f, 3 * self.t_f)
            body = body.reshape(t_lat - 1, h, w, self.t_f, 3)
            body = body.permute(0, 3, 1, 2, 4).reshape(t - 1, h, w, 3)
            video = torch.cat([frame0, body], dim=0)
        else:
            video = frame0
        return (video + 0.5).numpy().astype(np.float32)


class _ConvEncoder(nn.Module):
    def __init__(self, in_ch, hidden, out_ch, s_f):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, hidden, kernel_size=s_f, stride=s_f),
            nn.GELU(),
            nn.Conv2d(hidden, hidden, kernel_size=3, padding=1),
            nn.GELU(),
            nn.Conv2d(hidden, out_ch, kernel_size=1),
        )

    def forward(self, x):
        return self.net(x)


class _ConvDecoder(nn.Module):
    def __init__(self, in_ch, hidden, out_ch, s_f):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, hidden, kernel_size=1),
            nn.GELU(),
            nn.Conv2d(hidden, hidden, kernel_size=3, padding=1),
            nn.GELU(),
            nn.ConvTranspose2d(hidden, out_ch, kernel_size=s_f, stride=s_f),
        )

    def forward(self, x):
        return self.net(x)


class ConvCodec:
    """Trainable strided-conv autoencoder over causal frame groups.

    Frames are grouped exactly like the patchify codec (frame 0 alone, the
    first group's channels filled by repeating it); each group of 3*t_f
    channels is mapped to a latent plane by strided convs. Decoding clamps
    to [0, 1].
    """

    backend = "conv"

    def __init__(
        self,
        temporal_factor: int = 2,
        spatial_factor: int = 4,
        latent_channels: int = 48,
        hidden_channels: int = 128,
        seed: int = 0,
    ):
        self.t_f = temporal_factor
        self.s_f = spatial_factor
        self.latent_channels = latent_channels
        self.hidden_channels = hidden_channels
        torch.manual_seed(seed)
        in_ch = 3 * self.t_f
        self.encoder = _ConvEncoder(
            in_ch, hidden_channels, latent_channels, spatial_factor
        )
        self.decoder = _ConvDecoder(
            latent_channels, hidden_channels, in_ch, spatial_factor
        )
        self.encoder.eval()
        self.decoder.eval()

    # -- grouping ------------------------------------------------------------

    def _group(self, video_t: torch.Tensor) -> torch.Tensor:
        """T x H x W x 3 -> T' x (3 t_f) x H x W causal frame groups."""
        t, h, w, _ = video_t.shape
        t_lat = 1 + (t - 1) // self.t_f
        first = video_t[:1].repeat(self.t_f, 1, 1, 1)[None]   # 1 x t_f x H x W x 3
        groups = [first]
        if t > 1:
            groups.append(video_t[1:].reshape(t_lat - 1, self.t_f, h, w, 3))
        grouped = torch.cat(groups, dim=0)                    # T' x t_f x H x W x 3
        return grouped.permute(0, 1, 4, 2, 3).reshape(
            t_lat, 3 * self.t_f, h, w
        )

    def _ungroup(self, planes: torch.Tensor, t: int, h: int, w: int):
        t_lat = planes.shape[0]
        x = planes.reshape(t_lat, self.t_f, 3, h, w).permute(0, 1, 3, 4, 2)
        frame0 = x[0, :1]                                     # 1 x H x W x 3
        if t > 1:
            body = x[1:].reshape((t_lat - 1) * self.t_f, h, w, 3)
            return torch.cat([frame0, body], dim=0)
        return frame0

    # -- torch-side paths (used by training) ----------------------------------

    def encode_t(self, video_t: torch.Tensor) -> torch.Tensor:
        t, h, w, _ = video_t.shape
        latent_grid(t, h, w, self.t_f, self.s_f)  # validity check
        z = self.encoder(self._group(video_t) - 0.5)
        return z.permute(0, 2, 3, 1)              # T' x H' x W' x C

    def decode_t(self, tokens: torch.Tensor, source_shape) -> torch.Tensor:
        t, h, w = source_shape
        planes = self.decoder(tokens.permute(0, 3, 1, 2))
        return self._ungroup(planes, t, h, w) + 0.5

    # -- public numpy interface ----------------------------------------------

    def encode(self, video: np.ndarray) -> LatentVideo:
        video = _check_video(video)
        with torch.no_grad():
            tokens = self.encode_t(torch.from_numpy(video))
        return LatentVideo(
            tokens=tokens,
            factors=(self.t_f, self.s_f),
            source_shape=tuple(video.shape[:3]),
        )

    def decode(self, latent: LatentVideo) -> np.ndarray:
        t, h, w = latent.source_shape
        t_lat = 1 + (t - 1) // self.t_f
        expect = (t_lat, h // self.s_f, w // self.s_f, self.latent_channels)
        if tuple(latent.tokens.shape) != expect:
            raise ValueError(
                f"latent shape {tuple(latent.tokens.shape)} inconsistent "
                f"with source {latent.source_shape}; expected {expect}"
            )
        with torch.no_grad():
            video = self.decode_t(latent.tokens, latent.source_shape)
        return video.clamp(0.0, 1.0).numpy()

    # -- persistence -----------------------------------------------------------

    def parameters(self):
        yield from self.encoder.parameters()
        yield from self.decoder.parameters()

    def state_tensors(self) -> dict:
        out = {}
        for prefix, module in (("encoder", self.encoder), ("decoder", self.decoder)):
            for name, tensor in module.state_dict().items():
                out[f"{prefix}.{name}"] = tensor.numpy()
        return out

    def save(self, path) -> None:
        save_tensors(
            path,
            self.state_tensors(),
            meta={
                "backend": self.backend,
                "temporal_factor": self.t_f,
                "spatial_factor": self.s_f,
                "latent_channels": self.latent_channels,
                "hidden_channels": self.hidden_channels,
            },
        )

    @classmethod
    def load(cls, path) -> "ConvCodec":
        tensors, meta = load_tensors(path)
        if meta.get("backend") != "conv":
            raise ValueError(f"{path} is not a conv codec checkpoint")
        codec = cls(
            temporal_factor=meta["temporal_factor"],
            spatial_factor=meta["spatial_factor"],
            latent_channels=meta["latent_channels"],
            hidden_channels=meta["hidden_channels"],
        )
        enc = {
            k.split(".", 1)[1]: torch.from_numpy(v)
            for k, v in tensors.items() if k.startswith("encoder.")
        }
        dec = {
            k.split(".", 1)[1]: torch.from_numpy(v)
            for k, v in tensors.items() if k.startswith("decoder.")
        }
        codec.encoder.load_state_dict(enc)
        codec.decoder.load_state_dict(dec)
        return codec


def make_codec(cfg: CodecConfig, seed: int = 0):
    if cfg.backend == "patchify":
        return PatchifyCodec(cfg.temporal_factor, cfg.spatial_factor)
    if cfg.backend == "conv":
        return ConvCodec(
            cfg.temporal_factor,
            cfg.spatial_factor,
            cfg.resolved_latent_channels(),
            cfg.hidden_channels,
            seed=seed,
        )
    raise ValueError(f"unknown codec backend {cfg.backend!r}")


def standardize_latent_scale(codec: ConvCodec, clips: list) -> float:
    """Rescale ``codec`` in place so its latents have unit std over ``clips``.

    The flow-matching prior is standard normal, so the velocity target is
    ``eps - z_0``. When the trained encoder settles on a latent scale far
    below 1 (nothing in the reconstruction loss pins it), the informative
    ``z_0`` part of the target shrinks against the noise part and the
    decoder amplifies every sampling error by the inverse scale. Folding
    the correction scalar into the encoder's output conv and the decoder's
    input conv fixes both without changing the round trip or adding state
    to the checkpoint format.

    Returns the std that was folded away.
    """
    if not clips:
        raise ValueError("need at least one clip to calibrate the scale")
    with torch.no_grad():
        sq_sum, sum_, count = 0.0, 0.0, 0
        for clip in clips:
            tokens = codec.encode(clip).tokens
            sq_sum += float((tokens ** 2).sum())
            sum_ += float(tokens.sum())
            count += tokens.numel()
        sigma = math.sqrt(max(sq_sum / count - (sum_ / count) ** 2, 0.0))
        if not (sigma > 0.0 and math.isfinite(sigma)):
            raise RuntimeError(f"degenerate latent distribution: std={sigma}")
        out_conv = codec.encoder.net[-1]
        in_conv = codec.decoder.net[0]
        out_conv.weight /= sigma
        out_conv.bias /= sigma
        in_conv.weight *= sigma
    return sigma


def train_autoencoder(
    clips: list,
    codec: ConvCodec,
    steps: int = 2000,
    lr: float = 1e-3,
    seed: int = 0,
    log_every: int = 200,
) -> list:
    """Fit the conv codec to a handful of clips by plain MSE.

    Returns the per-step loss history. Aborts with diagnostics if the loss
    goes non-finite.
    """
    if not clips:
        raise ValueError("need at least one clip to train the codec")
    videos = [torch.from_numpy(_check_video(c)) for c in clips]
    params = list(codec.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    codec.encoder.train()
    codec.decoder.train()
    losses = []
    for step in range(steps):
        video = videos[rng.integers(len(videos))]
        tokens = codec.encode_t(video)
        recon = codec.decode_t(tokens, tuple(video.shape[:3]))
        loss = torch.mean((recon - video) ** 2)
        if not torch.isfinite(loss):
            raise RuntimeError(
                f"codec training diverged at step {step}: loss={loss.item()}"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    codec.encoder.eval()
    codec.decoder.eval()
    return losses
