"""Synthetic moving-dot clips for desk-scale training and evaluation.

Each clip is a bright white disk sliding over a smooth colored texture.
The disk centers double as the ground-truth tool-tip trajectory, and the
union of visited disks (dilated) is the affordance region, so the clips
exercise the full annotation schema. The texture is low-frequency on
purpose: a small codec can reconstruct it well, and the white dot is the
only place where all three channels saturate, which makes centroid
extraction trivial.
"""

from __future__ import annotations

import json
import math
import pathlib

import numpy as np
import scipy.ndimage

from surgvid.conditioning import (
    AffordanceMask,
    TrajectoryPoint,
    TrajectorySequence,
    rasterize_trajectory,
)
from surgvid.dataset import ClipRecord, write_annotation
from surgvid.enums import Action, Tool

DOT_RADIUS = 4


def make_background(
    height: int, width: int, seed: int
) -> np.ndarray:
    """Smooth colored texture with all channels kept well below the dot."""
    rng = np.random.default_rng(seed)
    chans = []
    for lo, hi in ((0.15, 0.65), (0.10, 0.60), (0.10, 0.55)):
        noise = rng.standard_normal((height, width))
        smooth = scipy.ndimage.gaussian_filter(noise, sigma=6.0)
        lo_v, hi_v = smooth.min(), smooth.max()
        chans.append(lo + (smooth - lo_v) / (hi_v - lo_v + 1e-9) * (hi - lo))
    return np.stack(chans, axis=-1).astype(np.float32)


def line_path(start: tuple, end: tuple):
    def path(i: int, k: int) -> tuple:
        a = i / max(k - 1, 1)
        return (
            start[0] + a * (end[0] - start[0]),
            start[1] + a * (end[1] - start[1]),
        )

    return path


def sine_path(x0: float, x1: float, y_mid: float, amplitude: float):
    def path(i: int, k: int) -> tuple:
        a = i / max(k - 1, 1)
        return (
            x0 + a * (x1 - x0),
            y_mid + amplitude * math.sin(2 * math.pi * a),
        )

    return path


def circle_path(cx: float, cy: float, radius: float):
    def path(i: int, k: int) -> tuple:
        a = 2 * math.pi * i / max(k - 1, 1)
        return (cx + radius * math.cos(a), cy + radius * math.sin(a))

    return path


def _disk(h: int, w: int, x: float, y: float, radius: float) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    return (xs - x) ** 2 + (ys - y) ** 2 <= radius ** 2


def render_dot_clip(
    background: np.ndarray, path, frames: int, dot_radius: int = DOT_RADIUS
) -> tuple:
    """Draw the moving dot; returns (frames TxHxWx3, center list)."""
    h, w, _ = background.shape
    video = np.empty((frames, h, w, 3), dtype=np.float32)
    centers = []
    for i in range(frames):
        x, y = path(i, frames)
        frame = background.copy()
        frame[_disk(h, w, x, y, dot_radius)] = 1.0
        video[i] = frame
        centers.append((x, y))
    return video, centers


def make_moving_dot_clip(
    clip_id: str,
    source_video_id: str,
    action: Action,
    tool: Tool,
    path,
    width: int = 128,
    height: int = 72,
    frames: int = 81,
    background_seed: int = 0,
    dot_radius: int = DOT_RADIUS,
) -> ClipRecord:
    background = make_background(height, width, seed=background_seed)
    video, centers = render_dot_clip(background, path, frames, dot_radius)
    points = tuple(
        TrajectoryPoint(frame=i, x=float(x), y=float(y), present=True)
        for i, (x, y) in enumerate(centers)
    )
    trajectory = TrajectorySequence(
        points=points,
        tool_class=tool.class_id,
        length=frames,
        canvas=(width, height),
    )
    visited = np.zeros((height, width), dtype=bool)
    for x, y in centers:
        visited |= _disk(height, width, x, y, dot_radius + 3)
    affordance = AffordanceMask(mask=visited.astype(np.float32))
    return ClipRecord(
        clip_id=clip_id,
        source_video_id=source_video_id,
        frames=video,
        fps=25.0,
        action=action,
        tool=tool,
        affordance=affordance,
        trajectory=trajectory,
    )


# The integration fixture: three training sweeps sharing one background and
# one action, so the only signal separating the clips is the trajectory
# itself, plus a held-out path the model never trains on.
INTEGRATION_PATHS = {
    "train_right": line_path((20.0, 36.0), (108.0, 36.0)),
    "train_down": line_path((64.0, 12.0), (64.0, 60.0)),
    "train_diag": line_path((20.0, 12.0), (108.0, 60.0)),
    "heldout_left": line_path((108.0, 48.0), (20.0, 24.0)),
}


def make_integration_set(
    width: int = 128,
    height: int = 72,
    frames: int = 81,
    dot_radius: int = DOT_RADIUS,
) -> tuple:
    """Three overfit clips plus one held-out-trajectory clip."""
    records = {}
    for name, path in INTEGRATION_PATHS.items():
        records[name] = make_moving_dot_clip(
            clip_id=name,
            source_video_id=f"src_{name}",
            action=Action.GRASPING,
            tool=Tool.GRASPER,
            path=path,
            width=width,
            height=height,
            frames=frames,
            background_seed=7,
            dot_radius=dot_radius,
        )
    train = [records["train_right"], records["train_down"], records["train_diag"]]
    return train, records["heldout_left"]


def translation_augment(
    videos: list,
    copies: int = 3,
    seed: int = 0,
    mirror: bool = False,
    reverse: bool = False,
) -> list:
    """Original videos plus randomly rolled duplicates.

    An autoencoder fit on a handful of clips co-adapts to where their
    content happens to sit; wrap-around rolls force it to reconstruct the
    same content anywhere on the canvas, which is what a novel trajectory
    needs at decode time. ``mirror`` adds random axis flips and ``reverse``
    random time reversal on top of each roll: rolls alone preserve motion
    direction, and a decoder fit on same-direction clips places within-group
    frames where a same-direction mover would be, several pixels off for a
    clip moving the other way.
    """
    rng = np.random.default_rng(seed)
    out = list(videos)
    for video in videos:
        _, h, w, _ = video.shape
        for _ in range(copies):
            dy = int(rng.integers(0, h))
            dx = int(rng.integers(0, w))
            v = np.roll(video, (dy, dx), axis=(1, 2))
            if mirror:
                if rng.random() < 0.5:
                    v = v[:, :, ::-1]
                if rng.random() < 0.5:
                    v = v[:, ::-1]
            if reverse and rng.random() < 0.5:
                v = v[::-1]
            # plain copy: flipping a length-1 axis leaves a negative stride
            # that ascontiguousarray would wave through
            out.append(v.copy())
    return out


def codec_training_pool(records: list, copies: int = 5, seed: int = 0) -> list:
    """Every video the conditioning bundle pushes through the codec.

    Besides the clips themselves, bundle construction encodes rasterized
    trajectory stacks and affordance frames; a codec fit only on clip
    content garbles those into near-constant latents. Mirrored/reversed
    rolls keep decodes honest at positions and motion directions the
    training clips never visit.
    """
    sources = []
    for rec in records:
        h, w = rec.frames.shape[1:3]
        sources.append(rec.frames)
        sources.append(rasterize_trajectory(rec.trajectory, h, w).maps)
        sources.append(
            np.repeat(rec.affordance.mask[None, ..., None], 3, axis=-1).astype(
                np.float32
            )
        )
    return translation_augment(
        sources, copies=copies, seed=seed, mirror=True, reverse=True
    )


_ACTION_PATHS = {
    Action.CLIPPING: lambda rng, w, h: line_path(
        (w * 0.15, h * (0.3 + 0.4 * rng.random())),
        (w * 0.85, h * (0.3 + 0.4 * rng.random())),
    ),
    Action.GRASPING: lambda rng, w, h: line_path(
        (w * 0.15, h * 0.15), (w * 0.85, h * 0.85)
    ),
    Action.CUTTING: lambda rng, w, h: line_path(
        (w * (0.3 + 0.4 * rng.random()), h * 0.15),
        (w * (0.3 + 0.4 * rng.random()), h * 0.85),
    ),
    Action.DISSECTING: lambda rng, w, h: circle_path(
        w * 0.5, h * 0.5, min(w, h) * 0.3
    ),
}

_ACTION_TOOLS = {
    Action.CLIPPING: Tool.CLIPPER,
    Action.GRASPING: Tool.GRASPER,
    Action.CUTTING: Tool.SCISSORS,
    Action.DISSECTING: Tool.HOOK,
}


def make_recognition_set(
    per_class: int = 2,
    width: int = 32,
    height: int = 32,
    frames: int = 81,
    seed: int = 0,
) -> list:
    """Small labeled set where each action has a distinctive motion pattern."""
    rng = np.random.default_rng(seed)
    records = []
    for action in Action:
        for i in range(per_class):
            path = _ACTION_PATHS[action](rng, width, height)
            records.append(
                make_moving_dot_clip(
                    clip_id=f"{action.value}_{i}",
                    source_video_id=f"src_{action.value}_{i}",
                    action=action,
                    tool=_ACTION_TOOLS[action],
                    path=path,
                    width=width,
                    height=height,
                    frames=frames,
                    background_seed=int(rng.integers(10_000)),
                    dot_radius=3,
                )
            )
    return records


# --- centroid extraction for controllability checks ---------------------------


def extract_dot_centroid(frame: np.ndarray) -> tuple | None:
    """Centroid of the bright white dot, or None if nothing stands out.

    The dot is the only place all three channels are high, so the minimum
    over channels isolates it from the colored background, whose
    channel-minimum stays below ~0.4 by construction. The 0.55 floor sits
    between that and pure white with margin on both sides: reconstructions
    can dim the dot well below 1.0 without losing it, while nothing in the
    background can cross from below.
    """
    brightness = np.asarray(frame).min(axis=-1)
    threshold = max(0.55, float(brightness.max()) - 0.12)
    mask = brightness >= threshold
    if not mask.any():
        return None
    ys, xs = np.nonzero(mask)
    weights = brightness[ys, xs]
    return (
        float(np.average(xs, weights=weights)),
        float(np.average(ys, weights=weights)),
    )


def trajectory_adherence(
    video: np.ndarray, trajectory: TrajectorySequence, tolerance: float
) -> float:
    """Fraction of frames whose dot centroid is within tolerance of the track."""
    hits = 0
    total = 0
    for point in trajectory.points:
        if not point.present:
            continue
        total += 1
        centroid = extract_dot_centroid(video[point.frame])
        if centroid is None:
            continue
        if math.hypot(centroid[0] - point.x, centroid[1] - point.y) <= tolerance:
            hits += 1
    return hits / total if total else 0.0


# --- on-disk fixture ----------------------------------------------------------


def write_dataset(directory, records: list) -> pathlib.Path:
    """Write clips (.npz), annotations, and a JSONL manifest; returns its path."""
    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in records:
        clip_file = directory / f"{rec.clip_id}.npz"
        ann_file = directory / f"{rec.clip_id}.txt"
        np.savez_compressed(clip_file, frames=rec.frames, fps=rec.fps)
        write_annotation(
            ann_file,
            rec.action,
            rec.tool,
            rec.trajectory.canvas,
            rec.affordance,
            rec.trajectory,
        )
        lines.append(
            json.dumps(
                {
                    "clip": clip_file.name,
                    "annotation": ann_file.name,
                    "source": rec.source_video_id,
                }
            )
        )
    manifest = directory / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
