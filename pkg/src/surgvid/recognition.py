"""Downstream action-recognition harness.

A small factorized spatiotemporal CNN (2D spatial blocks, then a 1D
temporal block) is trained on 16-frame segments to predict the action
class, with or without synthetic augmentation clips mixed in, and scored
per class on a held-out real test set.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from surgvid.config import RecognizerConfig
from surgvid.enums import Action

SEGMENT_FRAMES = 16
ACTIONS = tuple(Action)
ACTION_INDEX = {a: i for i, a in enumerate(ACTIONS)}


def sample_segments(
    frames: np.ndarray, count: int, seed: int
) -> list:
    """Draw ``count`` random 16-frame windows; returns (start, segment) pairs."""
    frames = np.asarray(frames)
    t = frames.shape[0]
    if t < SEGMENT_FRAMES:
        raise ValueError(
            f"clip has {t} frames; segments need at least {SEGMENT_FRAMES}"
        )
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        start = int(rng.integers(0, t - SEGMENT_FRAMES + 1))
        out.append((start, frames[start:start + SEGMENT_FRAMES]))
    return out


def centered_segment(frames: np.ndarray) -> np.ndarray:
    t = frames.shape[0]
    if t < SEGMENT_FRAMES:
        raise ValueError(
            f"clip has {t} frames; segments need at least {SEGMENT_FRAMES}"
        )
    start = (t - SEGMENT_FRAMES) // 2
    return frames[start:start + SEGMENT_FRAMES]


@dataclass
class SegmentBatch:
    segments: torch.Tensor    # B x 16 x h x w x 3
    labels: torch.Tensor      # B int64

    def __post_init__(self):
        if self.segments.shape[1] != SEGMENT_FRAMES:
            raise ValueError(
                f"segments must have {SEGMENT_FRAMES} frames, "
                f"got {self.segments.shape[1]}"
            )


class ActionClassifier(nn.Module):
    """Two strided 2D conv blocks per frame, one temporal conv, linear head."""

    def __init__(self, channels: int = 32, classes: int = 4, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.spatial = nn.Sequential(
            nn.Conv2d(3, channels, kernel_size=3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(channels, channels, kernel_size=3, stride=2, padding=1),
            nn.GELU(),
        )
        self.temporal = nn.Sequential(
            nn.Conv1d(channels, channels, kernel_size=3, padding=1),
            nn.GELU(),
        )
        self.head = nn.Linear(channels, classes)

    def forward(self, segments: torch.Tensor) -> torch.Tensor:
        b, t, h, w, c = segments.shape
        x = segments.permute(0, 1, 4, 2, 3).reshape(b * t, c, h, w)
        x = self.spatial(x)
        x = x.mean(dim=(2, 3)).reshape(b, t, -1).transpose(1, 2)
        x = self.temporal(x).mean(dim=2)
        return self.head(x)


def train_classifier(
    clips: list,
    cfg: RecognizerConfig,
    synthetic_clips: list | None = None,
) -> tuple:
    """Train on real (plus optional synthetic) clips.

    Returns (model, run metadata). Classes absent from the training pool
    are recorded as warnings rather than raised — the no-augmentation rare
    class regime trains exactly like this.
    """
    pool = list(clips) + list(synthetic_clips or [])
    if not pool:
        raise ValueError("no training clips")
    present = {c.action for c in pool}
    missing = [a.value for a in ACTIONS if a not in present]
    metadata = {
        "use_augmented": bool(synthetic_clips),
        "real_clip_ids": [c.clip_id for c in clips],
        "synthetic_clip_ids": [c.clip_id for c in (synthetic_clips or [])],
        "warnings": (
            [f"classes absent from training set: {missing}"] if missing else []
        ),
        "config": dataclasses.asdict(cfg),
        "loss_history": [],
    }
    model = ActionClassifier(channels=cfg.channels, seed=cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    for step in range(cfg.steps):
        picks = rng.integers(0, len(pool), size=min(cfg.batch_size, len(pool)))
        segs, labels = [], []
        for j in picks:
            clip = pool[j]
            start, seg = sample_segments(
                clip.frames, 1, seed=int(rng.integers(2 ** 31))
            )[0]
            segs.append(torch.from_numpy(np.ascontiguousarray(seg)))
            labels.append(ACTION_INDEX[clip.action])
        batch = SegmentBatch(
            segments=torch.stack(segs).float(),
            labels=torch.tensor(labels, dtype=torch.long),
        )
        logits = model(batch.segments)
        loss = nn.functional.cross_entropy(logits, batch.labels)
        if not torch.isfinite(loss):
            raise RuntimeError(f"classifier training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        metadata["loss_history"].append(float(loss.detach()))
    return model, metadata


@dataclass
class ClassReport:
    precision: dict
    recall: dict
    f1: dict
    support: dict
    confusion: np.ndarray = field(repr=False)    # rows true, cols predicted

    def to_json(self) -> str:
        return json.dumps(
            {
                "precision": self.precision,
                "recall": self.recall,
                "f1": self.f1,
                "support": self.support,
                "confusion": self.confusion.tolist(),
                "classes": [a.value for a in ACTIONS],
            },
            indent=2,
        )


def report_from_confusion(confusion: np.ndarray) -> ClassReport:
    precision, recall, f1, support = {}, {}, {}, {}
    for i, action in enumerate(ACTIONS):
        tp = float(confusion[i, i])
        col = float(confusion[:, i].sum())
        row = float(confusion[i, :].sum())
        p = tp / col if col > 0 else 0.0
        r = tp / row if row > 0 else 0.0
        f = 2 * p * r / (p + r) if (p + r) > 0 else 0.0
        precision[action.value] = p
        recall[action.value] = r
        f1[action.value] = f
        support[action.value] = int(row)
    return ClassReport(
        precision=precision, recall=recall, f1=f1, support=support,
        confusion=confusion,
    )


def evaluate(model: ActionClassifier, test_clips: list) -> ClassReport:
    """Score argmax predictions on one centered segment per test clip."""
    confusion = np.zeros((len(ACTIONS), len(ACTIONS)), dtype=np.int64)
    model.eval()
    with torch.no_grad():
        for clip in test_clips:
            seg = centered_segment(clip.frames)
            x = torch.from_numpy(np.ascontiguousarray(seg)).float()[None]
            pred = int(model(x).argmax(dim=1))
            confusion[ACTION_INDEX[clip.action], pred] += 1
    return report_from_confusion(confusion)


def save_classifier(path, model: ActionClassifier, metadata: dict) -> None:
    from surgvid.tensorio import save_tensors

    tensors = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    save_tensors(path, tensors, meta=metadata)
