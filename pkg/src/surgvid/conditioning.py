"""Conditioning signals: prompt text, reference frame, affordance, trajectory.

Everything on the image side is numpy float32 in [0, 1]; latents produced by
``build_bundle`` are torch tensors ready for the denoiser.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from surgvid.enums import Action, Tool

PROMPT_TEMPLATE = (
    "A robotic da Vinci {tool} performs {action} during a cholecystectomy. "
    "The laparoscopic camera view shows the {tool} within the abdominal "
    "cavity. The {tool} moves precisely as it executes the {action} motion."
)


def render_prompt(tool: Tool, action: Action) -> str:
    """Fill the fixed three-sentence prompt template."""
    if not isinstance(tool, Tool):
        raise ValueError(f"tool must be a Tool enum, got {tool!r}")
    if not isinstance(action, Action):
        raise ValueError(f"action must be an Action enum, got {action!r}")
    return PROMPT_TEMPLATE.format(tool=tool.value, action=action.value)


@dataclass(frozen=True)
class PromptSpec:
    tool: Tool
    action: Action
    rendered: str = ""

    def __post_init__(self):
        if not self.rendered:
            object.__setattr__(
                self, "rendered", render_prompt(self.tool, self.action)
            )


@dataclass(frozen=True)
class TrajectoryPoint:
    frame: int
    x: float
    y: float
    present: bool = True


@dataclass(frozen=True)
class TrajectorySequence:
    """Per-frame 2D tool-tip track over a clip of ``length`` frames."""

    points: tuple
    tool_class: int
    length: int
    canvas: tuple  # (width, height) the coordinates refer to

    def __post_init__(self):
        if not (0 <= self.tool_class <= 3):
            raise ValueError(f"tool_class must be in [0,3], got {self.tool_class}")
        if len(self.points) != self.length:
            raise ValueError(
                f"expected {self.length} trajectory points, got {len(self.points)}"
            )
        w, h = self.canvas
        for i, p in enumerate(self.points):
            if p.frame != i:
                raise ValueError(
                    f"trajectory frame indices must be 0..{self.length - 1} "
                    f"in order; point {i} has frame {p.frame}"
                )
            if p.present and not (0 <= p.x < w and 0 <= p.y < h):
                raise ValueError(
                    f"trajectory point at frame {i} outside canvas: "
                    f"({p.x}, {p.y}) vs {w}x{h}"
                )


def default_radius(width: int) -> int:
    """Disk radius used for trajectory rasterization: 2% of width, >= 2 px."""
    return max(2, round(0.02 * width))


@dataclass(frozen=True)
class TrajectoryMapStack:
    maps: np.ndarray  # k x h x w x 3, float32 in [0,1]
    radius: int


def rasterize_trajectory(
    traj: TrajectorySequence, h: int, w: int, radius: int | None = None
) -> TrajectoryMapStack:
    """Render the track as a stack of RGB maps.

    Each present point becomes a filled disk; R/G carry the two-bit tool
    class (R = c mod 2, G = c//2 mod 2) and B marks presence. Frames where
    the tool is absent stay all-zero. Coordinates are rescaled from the
    trajectory's canvas to (w, h).
    """
    if radius is None:
        radius = default_radius(w)
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    if h < 2 * radius or w < 2 * radius:
        raise ValueError(f"map {w}x{h} too small for radius {radius}")
    cw, ch = traj.canvas
    sx, sy = w / cw, h / ch
    c = traj.tool_class
    rgb = np.array([c % 2, (c // 2) % 2, 1.0], dtype=np.float32)
    maps = np.zeros((traj.length, h, w, 3), dtype=np.float32)
    ys, xs = np.mgrid[0:h, 0:w]
    for p in traj.points:
        if not p.present:
            continue
        x, y = p.x * sx, p.y * sy
        if not (0 <= x < w and 0 <= y < h):
            raise ValueError(
                f"point at frame {p.frame} falls outside the {w}x{h} map"
            )
        disk = (xs - x) ** 2 + (ys - y) ** 2 <= radius ** 2
        maps[p.frame][disk] = rgb
    return TrajectoryMapStack(maps=maps, radius=radius)


@dataclass(frozen=True)
class AffordanceMask:
    mask: np.ndarray  # h x w, values in {0, 1}

    def __post_init__(self):
        vals = np.unique(self.mask)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError("affordance mask must be binary")


def encode_affordance(mask: np.ndarray, h: int, w: int) -> AffordanceMask:
    """Nearest-neighbor resample of a binary mask to (h, w)."""
    mask = np.asarray(mask)
    if not np.all(np.isin(np.unique(mask), (0, 1))):
        raise ValueError("affordance mask must be binary")
    h0, w0 = mask.shape
    rows = (np.arange(h) * h0) // h
    cols = (np.arange(w) * w0) // w
    out = mask[np.ix_(rows, cols)].astype(np.float32)
    return AffordanceMask(mask=out)


@dataclass
class NullFlags:
    """Which conditioning signals are replaced by their learned null tokens."""

    text: bool = False
    reference: bool = False
    trajectory: bool = False
    affordance: bool = False

    def any(self) -> bool:
        return self.text or self.reference or self.trajectory or self.affordance


@dataclass
class ConditioningBundle:
    z_a: torch.Tensor        # text embeddings, n_tokens x text_dim
    z_f: torch.Tensor        # reference-frame latent, 1 x H' x W' x C
    z_gamma: torch.Tensor    # affordance latent, 1 x H' x W' x C
    z_p: torch.Tensor        # trajectory latent, T' x H' x W' x C
    null_flags: NullFlags = field(default_factory=NullFlags)

    def with_nulls(self, **flags) -> "ConditioningBundle":
        return ConditioningBundle(
            z_a=self.z_a, z_f=self.z_f, z_gamma=self.z_gamma, z_p=self.z_p,
            null_flags=replace(self.null_flags, **flags),
        )


def build_bundle(prompt, ref_frame, affordance, traj_maps, codec, text_encoder):
    """Encode the four signals into latent space.

    Reference frame and affordance go through the codec as one-frame videos
    (the mask replicated to 3 channels); the trajectory map stack is encoded
    as a video of its own; text goes through the pluggable encoder.
    """
    ref = np.asarray(ref_frame, dtype=np.float32)
    if ref.ndim != 3 or ref.shape[-1] != 3:
        raise ValueError(f"reference frame must be HxWx3, got {ref.shape}")
    h, w = ref.shape[:2]
    if affordance.mask.shape != (h, w):
        raise ValueError(
            f"affordance mask {affordance.mask.shape} does not match the "
            f"reference frame {h}x{w}"
        )
    if traj_maps.maps.shape[1:3] != (h, w):
        raise ValueError(
            f"trajectory maps {traj_maps.maps.shape[1:3]} do not match the "
            f"reference frame {h}x{w}"
        )
    z_f = codec.encode(ref[None]).tokens
    gamma = np.repeat(affordance.mask[..., None], 3, axis=-1).astype(np.float32)
    z_gamma = codec.encode(gamma[None]).tokens
    z_p = codec.encode(traj_maps.maps).tokens
    z_a = text_encoder(prompt.rendered)
    return ConditioningBundle(z_a=z_a, z_f=z_f, z_gamma=z_gamma, z_p=z_p)


class TemplateTextEncoder:
    """Whitespace tokenizer + frozen random embedding table.

    The prompt template has a tiny closed vocabulary (template words plus
    the tool/action names), so a lookup table is enough to give each
    rendered prompt a distinct embedding sequence. Index 0 is <unk>.
    """

    def __init__(self, dim: int = 256, seed: int = 0):
        words = set()
        for tool in Tool:
            for action in Action:
                words.update(_tokenize(render_prompt(tool, action)))
        self.vocab = {w: i + 1 for i, w in enumerate(sorted(words))}
        rng = np.random.default_rng(seed)
        table = rng.standard_normal((len(self.vocab) + 1, dim)) / np.sqrt(dim)
        self.table = torch.from_numpy(table.astype(np.float32))
        self.dim = dim

    def __call__(self, text: str) -> torch.Tensor:
        ids = [self.vocab.get(w, 0) for w in _tokenize(text)]
        if not ids:
            raise ValueError("cannot encode empty text")
        return self.table[torch.tensor(ids, dtype=torch.long)]


def _tokenize(text: str) -> list[str]:
    return re.findall(r"[a-z]+", text.lower())


def trajectory_to_json(traj: TrajectorySequence) -> dict:
    """Portable dict form used by the service and offline tools."""
    return {
        "tool_class": traj.tool_class,
        "canvas": {"width": traj.canvas[0], "height": traj.canvas[1]},
        "points": [
            {"frame": p.frame, "x": p.x, "y": p.y, "present": bool(p.present)}
            for p in traj.points
        ],
    }


def trajectory_from_json(obj: dict) -> TrajectorySequence:
    try:
        canvas = (int(obj["canvas"]["width"]), int(obj["canvas"]["height"]))
        points = tuple(
            TrajectoryPoint(
                frame=int(p["frame"]), x=float(p["x"]), y=float(p["y"]),
                present=bool(p.get("present", True)),
            )
            for p in obj["points"]
        )
        tool_class = int(obj["tool_class"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed trajectory object: {exc}") from None
    return TrajectorySequence(
        points=points, tool_class=tool_class, length=len(points), canvas=canvas
    )
