"""Seamless compositing of tool sprites onto background frames.

Classic Poisson image editing: inside the blend region the output must
match the source's gradients while agreeing with the target on the
boundary, which is a discrete Poisson equation with Dirichlet boundary
conditions on the 5-point Laplacian. The system is symmetric positive
definite, so it is solved with conjugate gradients.
"""

from __future__ import annotations

import json
import pathlib
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from surgvid.conditioning import TrajectorySequence, default_radius
from surgvid.enums import AUGMENTATION_PAIRS, Action, Tool


def _cg(a, b, x0, rtol=1e-6, maxiter=10_000):
    try:
        return scipy.sparse.linalg.cg(a, b, x0=x0, rtol=rtol, maxiter=maxiter)
    except TypeError:  # scipy < 1.12 spells it tol
        return scipy.sparse.linalg.cg(a, b, x0=x0, tol=rtol, maxiter=maxiter)


def poisson_blend(
    source: np.ndarray,
    target: np.ndarray,
    mask: np.ndarray,
    offset: tuple = (0, 0),
) -> np.ndarray:
    """Blend ``source`` into ``target`` where ``mask`` is set.

    ``source`` and ``mask`` share a coordinate frame; ``offset`` (dy, dx)
    shifts them into the target. The masked region must sit strictly inside
    the target with at least one pixel of border. Gradients are taken from
    the source alone (no mixing). An empty mask returns the target as-is.
    """
    target = np.asarray(target, dtype=np.float64)
    source = np.asarray(source, dtype=np.float64)
    mask = np.asarray(mask) != 0
    if mask.shape != source.shape[:2]:
        raise ValueError(
            f"mask shape {mask.shape} must match source {source.shape[:2]}"
        )
    if not mask.any():
        return target.copy()
    dy, dx = offset
    ys, xs = np.nonzero(mask)
    ty, tx = ys + dy, xs + dx
    h, w = target.shape[:2]
    if ty.min() < 1 or tx.min() < 1 or ty.max() >= h - 1 or tx.max() >= w - 1:
        raise ValueError(
            "blend region touches or leaves the target border; placement "
            "must keep a 1-pixel margin"
        )

    n = len(ys)
    index = -np.ones((h, w), dtype=np.int64)
    index[ty, tx] = np.arange(n)

    # Source values on the (padded) source grid so edge pixels see zero
    # gradient across the patch boundary.
    pad = (
        np.pad(source, ((1, 1), (1, 1), (0, 0)), mode="edge")
        if source.ndim == 3
        else np.pad(source, 1, mode="edge")
    )

    rows, cols, vals = [], [], []
    channels = 1 if target.ndim == 2 else target.shape[2]
    b = np.zeros((n, channels))
    tgt = target if target.ndim == 3 else target[..., None]
    src = pad if pad.ndim == 3 else pad[..., None]
    for i in range(n):
        py, px = ty[i], tx[i]
        sy, sx = ys[i] + 1, xs[i] + 1   # padded source coordinates
        rows.append(i)
        cols.append(i)
        vals.append(4.0)
        for oy, ox in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            qy, qx = py + oy, px + ox
            b[i] += src[sy, sx] - src[sy + oy, sx + ox]
            j = index[qy, qx]
            if j >= 0:
                rows.append(i)
                cols.append(j)
                vals.append(-1.0)
            else:
                b[i] += tgt[qy, qx]
    a = scipy.sparse.csr_matrix(
        (vals, (rows, cols)), shape=(n, n)
    )

    out = tgt.astype(np.float64).copy()
    for c in range(channels):
        x0 = out[ty, tx, c]
        sol, info = _cg(a, b[:, c], x0=x0)
        if info != 0:
            raise RuntimeError(
                f"Poisson solver did not converge (info={info})"
            )
        out[ty, tx, c] = sol
    out = out if target.ndim == 3 else out[..., 0]
    return out


@dataclass(frozen=True)
class ToolSprite:
    rgb: np.ndarray          # h x w x 3 in [0,1]
    mask: np.ndarray         # h x w binary
    anchor: tuple            # (x, y) tool-tip pixel within the sprite
    tool: Tool = Tool.GRASPER


def validate_sprite(sprite: ToolSprite) -> None:
    """Check library invariants: nonempty mask, anchor inside its bbox."""
    if not np.any(sprite.mask):
        raise ValueError("sprite mask is empty")
    ys, xs = np.nonzero(sprite.mask)
    ax, ay = sprite.anchor
    if not (xs.min() <= ax <= xs.max() and ys.min() <= ay <= ys.max()):
        raise ValueError(
            f"anchor {sprite.anchor} outside mask bounding box "
            f"x[{xs.min()},{xs.max()}] y[{ys.min()},{ys.max()}]"
        )


def place_tool(
    background: np.ndarray, sprite: ToolSprite, position: tuple
) -> tuple:
    """Blend a sprite onto the background at top-left ``position`` (y, x).

    Returns (composed frame, realized anchor (x, y) in frame coordinates).
    Sprites with empty masks leave the background untouched.
    """
    h, w = background.shape[:2]
    sh, sw = sprite.mask.shape
    py, px = position
    if np.any(sprite.mask):
        ys, xs = np.nonzero(sprite.mask)
        if (
            py + ys.min() < 1
            or px + xs.min() < 1
            or py + ys.max() >= h - 1
            or px + xs.max() >= w - 1
        ):
            raise ValueError(
                f"placement {position} pushes the sprite mask out of the "
                f"{w}x{h} frame (1-pixel margin required)"
            )
    frame = poisson_blend(sprite.rgb, background, sprite.mask, offset=position)
    frame = np.clip(frame, 0.0, 1.0)
    anchor = (position[1] + sprite.anchor[0], position[0] + sprite.anchor[1])
    return frame, anchor


@dataclass(frozen=True)
class AugmentationRequest:
    background: np.ndarray
    sprite: ToolSprite
    position: tuple                 # sprite top-left (y, x)
    affordance: np.ndarray          # binary mask in frame coordinates
    trajectory: TrajectorySequence  # source track, class already of interest
    action: Action
    tool: Tool


def build_augmentation(request: AugmentationRequest) -> dict:
    """Compose the starting frame and conditioning inputs for one request.

    The trajectory keeps the source (x, y) sequence with only the tool
    class substituted; the prompt is rendered for the target action/tool.
    """
    from surgvid.conditioning import PromptSpec

    pair_tool = AUGMENTATION_PAIRS.get(request.action)
    if pair_tool is None or pair_tool != request.tool:
        allowed = {a.value: t.value for a, t in AUGMENTATION_PAIRS.items()}
        raise ValueError(
            f"action/tool pair ({request.action.value}, {request.tool.value}) "
            f"not augmentable; allowed pairs: {allowed}"
        )
    frame, anchor = place_tool(
        request.background, request.sprite, request.position
    )
    traj = replace(request.trajectory, tool_class=request.tool.class_id)
    start = traj.points[0]
    tol = default_radius(request.background.shape[1])
    if start.present:
        d = np.hypot(start.x - anchor[0], start.y - anchor[1])
        if d > tol:
            raise ValueError(
                f"trajectory start ({start.x:.0f},{start.y:.0f}) is "
                f"{d:.1f} px from the placed anchor {anchor}; tolerance "
                f"{tol} px"
            )
    prompt = PromptSpec(tool=request.tool, action=request.action)
    return {
        "frame": frame,
        "anchor": anchor,
        "affordance": request.affordance,
        "trajectory": traj,
        "prompt": prompt,
    }


def plan_augmentations(
    backgrounds: list,
    sprites: dict,
    counts: dict | None = None,
) -> list:
    """Lay out the synthetic-video batch: one request per target clip.

    ``backgrounds`` is a list of dicts with keys ``frame``, ``affordance``,
    ``trajectory``, ``position``; ``sprites`` maps Tool -> ToolSprite;
    ``counts`` maps Action -> number of requests (default: the rare-action
    plan of 110 clipping + 177 cutting). Backgrounds are cycled.
    """
    if counts is None:
        counts = {Action.CLIPPING: 110, Action.CUTTING: 177}
    requests = []
    for action, count in counts.items():
        tool = AUGMENTATION_PAIRS.get(action)
        if tool is None:
            raise ValueError(f"no augmentation tool pair for {action.value}")
        if tool not in sprites:
            raise ValueError(f"sprite library missing tool {tool.value}")
        for i in range(count):
            bg = backgrounds[i % len(backgrounds)]
            requests.append(
                AugmentationRequest(
                    background=bg["frame"],
                    sprite=sprites[tool],
                    position=bg["position"],
                    affordance=bg["affordance"],
                    trajectory=bg["trajectory"],
                    action=action,
                    tool=tool,
                )
            )
    return requests


def load_sprite_library(path) -> dict:
    """Read sprites from a directory of {name}.png / {name}_mask.png pairs.

    Each sprite has a JSON sidecar {name}.json with {"anchor": [x, y],
    "tool": "<tool name>"}. Returns {Tool: ToolSprite} keeping the first
    sprite seen per tool.
    """
    from PIL import Image

    path = pathlib.Path(path)
    sprites: dict = {}
    for meta_file in sorted(path.glob("*.json")):
        name = meta_file.stem
        rgb_file = path / f"{name}.png"
        mask_file = path / f"{name}_mask.png"
        if not rgb_file.exists() or not mask_file.exists():
            raise FileNotFoundError(
                f"sprite {name!r}: expected {rgb_file.name} and "
                f"{mask_file.name} next to the sidecar"
            )
        meta = json.loads(meta_file.read_text())
        sprite = ToolSprite(
            rgb=np.asarray(Image.open(rgb_file).convert("RGB"), dtype=np.float32)
            / 255.0,
            mask=(np.asarray(Image.open(mask_file).convert("L")) > 127).astype(
                np.float32
            ),
            anchor=tuple(meta["anchor"]),
            tool=Tool.parse(meta["tool"]),
        )
        validate_sprite(sprite)
        sprites.setdefault(sprite.tool, sprite)
    return sprites
