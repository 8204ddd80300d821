"""Annotated-clip data model, manifest ingestion, and train/test splitting.

A dataset is a JSONL manifest whose lines point at clip storage (a directory
of per-frame PNGs or an .npz) and a flat text annotation file per clip. All
clips are standardized to the target frame count and rate before training.
"""

from __future__ import annotations

import dataclasses
import json
import pathlib
from dataclasses import dataclass

import numpy as np

from surgvid.conditioning import (
    AffordanceMask,
    TrajectoryPoint,
    TrajectorySequence,
)
from surgvid.enums import Action, Tool

TARGET_FRAMES = 81
TARGET_FPS = 25


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    source_video_id: str
    frames: np.ndarray          # T x H x W x 3 float32 in [0,1]
    fps: float
    action: Action
    tool: Tool
    affordance: AffordanceMask
    trajectory: TrajectorySequence
    split: str = "train"

    def __post_init__(self):
        t, h, w, c = self.frames.shape
        if c != 3:
            raise ValueError(f"frames must be TxHxWx3, got {self.frames.shape}")
        if self.trajectory.length != t:
            raise ValueError(
                f"trajectory covers {self.trajectory.length} frames, "
                f"clip has {t}"
            )


def standardize_indices(
    t_in: int,
    fps_in: float,
    target_frames: int = TARGET_FRAMES,
    target_fps: float = TARGET_FPS,
) -> np.ndarray:
    """Frame-index map implementing resample-then-truncate-or-pad.

    Nearest-source-frame resampling to the target rate, then the first
    ``target_frames`` indices; short clips repeat the final index. Both the
    frames and the per-frame trajectory are gathered through this same map
    so they stay aligned.
    """
    if t_in < 1:
        raise ValueError("empty clip")
    if fps_in <= 0:
        raise ValueError(f"fps must be positive, got {fps_in}")
    n = max(1, round(t_in * target_fps / fps_in))
    idx = [min(t_in - 1, round(i * fps_in / target_fps)) for i in range(n)]
    if n >= target_frames:
        idx = idx[:target_frames]
    else:
        idx = idx + [idx[-1]] * (target_frames - n)
    return np.asarray(idx, dtype=np.int64)


def standardize_clip(frames: np.ndarray, fps_in: float) -> np.ndarray:
    """Resample to 25 fps and force exactly 81 frames (truncate / repeat-last)."""
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[0] < 1:
        raise ValueError("empty clip")
    idx = standardize_indices(frames.shape[0], fps_in)
    return frames[idx]


def standardize_trajectory(
    traj: TrajectorySequence, t_in: int, fps_in: float
) -> TrajectorySequence:
    """Apply the clip's standardization index map to its trajectory."""
    idx = standardize_indices(t_in, fps_in)
    points = tuple(
        dataclasses.replace(traj.points[j], frame=i)
        for i, j in enumerate(idx.tolist())
    )
    return TrajectorySequence(
        points=points,
        tool_class=traj.tool_class,
        length=len(points),
        canvas=traj.canvas,
    )


def partition_by_source(
    clips: list[ClipRecord], test_sources: set[str]
) -> tuple[list[ClipRecord], list[ClipRecord]]:
    """Split clips so no source video contributes to both sides."""
    known = {c.source_video_id for c in clips}
    unknown = set(test_sources) - known
    if unknown:
        raise ValueError(f"unknown test source ids: {sorted(unknown)}")
    train, test = [], []
    for clip in clips:
        if clip.source_video_id in test_sources:
            test.append(dataclasses.replace(clip, split="test"))
        else:
            train.append(dataclasses.replace(clip, split="train"))
    return train, test


# --- annotation text format -------------------------------------------------
#
#   action <name>
#   tool <name>
#   canvas <width> <height>
#   affordance <h> <w> <run lengths...>      (row-major RLE, zeros first)
#   frames <T>
#   <frame_index> <x> <y> <present_flag>     (T lines)


def encode_rle(mask: np.ndarray) -> list[int]:
    """Row-major run lengths, alternating values starting with 0."""
    flat = np.asarray(mask).reshape(-1).astype(np.int64)
    runs = []
    value = 0
    pos = 0
    while pos < flat.size:
        run = 0
        while pos < flat.size and flat[pos] == value:
            run += 1
            pos += 1
        runs.append(run)
        value = 1 - value
    return runs


def decode_rle(runs: list[int], h: int, w: int) -> np.ndarray:
    total = sum(runs)
    if total != h * w:
        raise ValueError(f"run lengths sum to {total}, expected {h * w}")
    flat = np.zeros(h * w, dtype=np.float32)
    pos = 0
    value = 0
    for run in runs:
        if value:
            flat[pos:pos + run] = 1
        pos += run
        value = 1 - value
    return flat.reshape(h, w)


def write_annotation(path, action, tool, canvas, affordance, trajectory):
    """Write one clip's annotation file; inverse of parse_annotation."""
    w, h = canvas
    lines = [
        f"action {action.value}",
        f"tool {tool.value}",
        f"canvas {w} {h}",
        "affordance "
        + f"{affordance.mask.shape[0]} {affordance.mask.shape[1]} "
        + " ".join(str(r) for r in encode_rle(affordance.mask)),
        f"frames {trajectory.length}",
    ]
    for p in trajectory.points:
        lines.append(f"{p.frame} {p.x:g} {p.y:g} {int(p.present)}")
    pathlib.Path(path).write_text("\n".join(lines) + "\n")


def parse_annotation(path) -> dict:
    """Parse an annotation file into its typed pieces.

    Raises ValueError mentioning the offending field on any malformed line.
    """
    lines = [
        ln for ln in pathlib.Path(path).read_text().splitlines() if ln.strip()
    ]

    def expect(i: int, key: str) -> list[str]:
        if i >= len(lines):
            raise ValueError(f"annotation truncated before '{key}' line")
        parts = lines[i].split()
        if parts[0] != key:
            raise ValueError(f"expected '{key}' line, got {lines[i]!r}")
        return parts[1:]

    action = Action.parse(_one(expect(0, "action"), "action"))
    tool = Tool.parse(_one(expect(1, "tool"), "tool"))
    canvas_parts = expect(2, "canvas")
    if len(canvas_parts) != 2:
        raise ValueError("canvas line must be 'canvas <width> <height>'")
    canvas = (int(canvas_parts[0]), int(canvas_parts[1]))
    aff_parts = expect(3, "affordance")
    if len(aff_parts) < 2:
        raise ValueError("affordance line must carry h w and run lengths")
    ah, aw = int(aff_parts[0]), int(aff_parts[1])
    try:
        mask = decode_rle([int(r) for r in aff_parts[2:]], ah, aw)
    except ValueError as exc:
        raise ValueError(f"affordance: {exc}") from None
    t = int(_one(expect(4, "frames"), "frames"))
    if len(lines) != 5 + t:
        raise ValueError(
            f"frames declares {t} trajectory lines, found {len(lines) - 5}"
        )
    points = []
    for i in range(t):
        parts = lines[5 + i].split()
        if len(parts) != 4:
            raise ValueError(
                f"trajectory line {i}: expected 'frame x y present', "
                f"got {lines[5 + i]!r}"
            )
        points.append(
            TrajectoryPoint(
                frame=int(parts[0]), x=float(parts[1]), y=float(parts[2]),
                present=bool(int(parts[3])),
            )
        )
    trajectory = TrajectorySequence(
        points=tuple(points), tool_class=tool.class_id, length=t, canvas=canvas
    )
    return {
        "action": action,
        "tool": tool,
        "canvas": canvas,
        "affordance": AffordanceMask(mask=mask),
        "trajectory": trajectory,
    }


def _one(parts: list[str], field: str) -> str:
    if len(parts) != 1:
        raise ValueError(f"{field} line must carry exactly one value")
    return parts[0]


# --- clip storage -----------------------------------------------------------


def load_clip_frames(path) -> tuple[np.ndarray, float]:
    """Load frames from a directory of PNGs or a single .npz.

    Returns (frames T x H x W x 3 float32 in [0,1], fps). Directories use
    sorted filename order; fps comes from an optional fps.txt (default 25).
    An .npz must hold a 'frames' array and may hold a scalar 'fps'.
    """
    path = pathlib.Path(path)
    if not path.exists():
        raise FileNotFoundError(f"clip not found: {path}")
    if path.is_dir():
        from PIL import Image

        files = sorted(
            p for p in path.iterdir() if p.suffix.lower() in (".png", ".bmp")
        )
        if not files:
            raise ValueError(f"no frames in clip directory {path}")
        frames = np.stack(
            [np.asarray(Image.open(f).convert("RGB")) for f in files]
        ).astype(np.float32) / 255.0
        fps_file = path / "fps.txt"
        fps = float(fps_file.read_text().strip()) if fps_file.exists() else 25.0
        return frames, fps
    if path.suffix == ".npz":
        data = np.load(path)
        if "frames" not in data:
            raise ValueError(f"{path} has no 'frames' array")
        frames = data["frames"]
        if frames.dtype == np.uint8:
            frames = frames.astype(np.float32) / 255.0
        fps = float(data["fps"]) if "fps" in data else 25.0
        return frames.astype(np.float32), fps
    raise ValueError(f"unsupported clip storage: {path}")


# --- manifest ---------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    clip_id: str
    clip_path: pathlib.Path
    annotation_path: pathlib.Path
    source_video_id: str


@dataclass
class DatasetManifest:
    entries: list
    rejected: list              # (line_no, clip_id or None, message)
    resolution: tuple = (1024, 576)
    frames: int = TARGET_FRAMES
    fps: int = TARGET_FPS

    def load_records(self, standardize: bool = True) -> list[ClipRecord]:
        records = []
        for entry in self.entries:
            frames, fps = load_clip_frames(entry.clip_path)
            ann = parse_annotation(entry.annotation_path)
            traj = ann["trajectory"]
            if standardize:
                t_in = frames.shape[0]
                frames = standardize_clip(frames, fps)
                traj = standardize_trajectory(traj, t_in, fps)
                fps = TARGET_FPS
            records.append(
                ClipRecord(
                    clip_id=entry.clip_id,
                    source_video_id=entry.source_video_id,
                    frames=frames,
                    fps=fps,
                    action=ann["action"],
                    tool=ann["tool"],
                    affordance=ann["affordance"],
                    trajectory=traj,
                )
            )
        return records


def ingest_manifest(path) -> DatasetManifest:
    """Read a JSONL manifest, validating every entry.

    Bad entries land in ``rejected`` with the clip id (when known) and a
    message naming the field; nothing is silently dropped, so
    len(entries) + len(rejected) equals the number of input lines.
    """
    path = pathlib.Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries, rejected = [], []
    seen_ids = set()
    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        clip_id = None
        try:
            obj = json.loads(line)
            for key in ("clip", "annotation", "source"):
                if key not in obj:
                    raise ValueError(f"missing manifest key {key!r}")
            clip_path = (path.parent / obj["clip"]).resolve()
            ann_path = (path.parent / obj["annotation"]).resolve()
            clip_id = clip_path.stem if clip_path.suffix else clip_path.name
            if clip_id in seen_ids:
                raise ValueError(f"duplicate clip_id {clip_id!r}")
            if not clip_path.exists():
                raise FileNotFoundError(f"missing clip file: {clip_path}")
            if not ann_path.exists():
                raise FileNotFoundError(f"missing annotation file: {ann_path}")
            parse_annotation(ann_path)  # full validation, discard result
            seen_ids.add(clip_id)
            entries.append(
                ManifestEntry(
                    clip_id=clip_id,
                    clip_path=clip_path,
                    annotation_path=ann_path,
                    source_video_id=str(obj["source"]),
                )
            )
        except (ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
            rejected.append((line_no, clip_id, str(exc)))
    return DatasetManifest(entries=entries, rejected=rejected)
