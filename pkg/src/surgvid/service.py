"""HTTP generation service consumed by the sketch UI and simulator bridge.

One worker thread drains a FIFO queue of GenerationJobs; request handling
stays concurrent and read-only against the loaded model, so seeds make
outputs byte-reproducible. Frames are served as lossless PNG.
"""

from __future__ import annotations

import base64
import io
import queue
import threading
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException, Response

from surgvid.conditioning import (
    PROMPT_TEMPLATE,
    TrajectoryPoint,
    TrajectorySequence,
)
from surgvid.config import SamplerConfig
from surgvid.dataset import decode_rle
from surgvid.enums import Action, Tool
from surgvid.pipeline import conditioning_inputs, generate_video

QUEUE_LIMIT = 8


class RequestError(Exception):
    """Validation failure carrying the offending field's path."""

    def __init__(self, field_path: str, message: str):
        super().__init__(message)
        self.field_path = field_path

    def detail(self) -> dict:
        return {"field": self.field_path, "message": str(self)}


def interpolate_trajectory(
    points: list, frames: int, canvas: tuple, tool_class: int
) -> TrajectorySequence:
    """Expand a sparse keypoint polyline to one point per frame.

    Linear interpolation between keyframes; positions are held constant
    before the first and after the last keypoint.
    """
    keys = sorted(points, key=lambda p: p["frame"])
    xs = np.interp(
        np.arange(frames),
        [p["frame"] for p in keys],
        [p["x"] for p in keys],
    )
    ys = np.interp(
        np.arange(frames),
        [p["frame"] for p in keys],
        [p["y"] for p in keys],
    )
    dense = tuple(
        TrajectoryPoint(frame=i, x=float(xs[i]), y=float(ys[i]), present=True)
        for i in range(frames)
    )
    return TrajectorySequence(
        points=dense, tool_class=tool_class, length=frames, canvas=canvas
    )


def parse_trajectory(obj, frames: int, tool_class: int) -> TrajectorySequence:
    if not isinstance(obj, dict):
        raise RequestError("trajectory", "must be an object")
    canvas = obj.get("canvas")
    if (
        not isinstance(canvas, dict)
        or "width" not in canvas
        or "height" not in canvas
    ):
        raise RequestError(
            "trajectory.canvas", "must carry width and height"
        )
    try:
        cw, ch = int(canvas["width"]), int(canvas["height"])
    except (TypeError, ValueError):
        raise RequestError("trajectory.canvas", "width/height must be integers")
    if cw < 2 or ch < 2:
        raise RequestError("trajectory.canvas", f"degenerate canvas {cw}x{ch}")
    points = obj.get("points")
    if not isinstance(points, list) or not points:
        raise RequestError("trajectory.points", "must be a non-empty array")
    if len(points) > frames:
        raise RequestError(
            "trajectory.points",
            f"{len(points)} points cannot resample to {frames} frames",
        )
    last_frame = -1
    for i, p in enumerate(points):
        path = f"trajectory.points[{i}]"
        if not isinstance(p, dict):
            raise RequestError(path, "must be an object")
        for key in ("frame", "x", "y"):
            if key not in p:
                raise RequestError(f"{path}.{key}", "missing")
            if not isinstance(p[key], (int, float)) or isinstance(p[key], bool):
                raise RequestError(f"{path}.{key}", "must be a number")
        if int(p["frame"]) != p["frame"]:
            raise RequestError(f"{path}.frame", "must be an integer")
        if not 0 <= p["frame"] < frames:
            raise RequestError(
                f"{path}.frame",
                f"frame {p['frame']} outside [0, {frames - 1}]; cannot "
                f"resample to {frames} frames",
            )
        if p["frame"] <= last_frame:
            raise RequestError(
                f"{path}.frame", "frame indices must be strictly increasing"
            )
        last_frame = int(p["frame"])
        if not (0 <= p["x"] < cw and 0 <= p["y"] < ch):
            raise RequestError(
                path, f"({p['x']}, {p['y']}) outside canvas {cw}x{ch}"
            )
    return interpolate_trajectory(points, frames, (cw, ch), tool_class)


def _decode_image_field(obj, field_path: str) -> np.ndarray:
    from PIL import Image

    if not isinstance(obj, dict):
        raise RequestError(field_path, "must be an object")
    if "image_b64" in obj:
        try:
            raw = base64.b64decode(obj["image_b64"], validate=True)
            img = Image.open(io.BytesIO(raw)).convert("RGB")
        except Exception as exc:
            raise RequestError(
                f"{field_path}.image_b64", f"not a decodable image: {exc}"
            )
        return np.asarray(img, dtype=np.float32) / 255.0
    if "path" in obj:
        try:
            img = Image.open(obj["path"]).convert("RGB")
        except Exception as exc:
            raise RequestError(f"{field_path}.path", str(exc))
        return np.asarray(img, dtype=np.float32) / 255.0
    raise RequestError(field_path, "needs image_b64 or path")


def _parse_affordance(obj, field_path: str) -> np.ndarray:
    if not isinstance(obj, dict):
        raise RequestError(field_path, "must be an object")
    if "rle" in obj:
        rle = obj["rle"]
        try:
            return decode_rle(
                [int(r) for r in rle["runs"]],
                int(rle["height"]),
                int(rle["width"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise RequestError(f"{field_path}.rle", str(exc))
    if "image_b64" in obj or "path" in obj:
        rgb = _decode_image_field(obj, field_path)
        return (rgb.mean(axis=-1) > 0.5).astype(np.float32)
    raise RequestError(field_path, "needs rle, image_b64, or path")


@dataclass
class GenerationJob:
    job_id: str
    state: str = "queued"            # queued -> running -> done|failed
    progress_step: int = 0
    progress_total: int = 0
    error: str | None = None
    frames: list = field(default_factory=list)   # uint8 HxWx3 arrays
    timings: dict = field(default_factory=dict)

    def public(self) -> dict:
        out = {
            "id": self.job_id,
            "state": self.state,
            "progress": {
                "step": self.progress_step,
                "total": self.progress_total,
            },
            "timings": self.timings,
        }
        if self.state == "failed":
            out["error"] = self.error
        if self.state == "done":
            out["frames"] = len(self.frames)
        return out


class GenerationService:
    """Owns the model, the job store, and the single worker thread."""

    def __init__(
        self,
        model,
        codec,
        text_encoder,
        resolution: tuple,
        frames: int = 81,
        sampler: SamplerConfig | None = None,
        queue_limit: int = QUEUE_LIMIT,
    ):
        self.model = model
        self.codec = codec
        self.text_encoder = text_encoder
        self.resolution = resolution          # (width, height)
        self.frames = frames
        self.sampler = sampler or SamplerConfig()
        self.jobs: dict[str, GenerationJob] = {}
        self.lock = threading.Lock()
        self.queue: queue.Queue = queue.Queue(maxsize=queue_limit)
        self.worker = threading.Thread(target=self._drain, daemon=True)
        self.worker.start()

    # -- request parsing ----------------------------------------------------

    def parse_request(self, body: dict) -> dict:
        if not isinstance(body, dict):
            raise RequestError("", "request body must be a JSON object")
        try:
            tool = Tool.parse(body.get("tool", ""))
        except ValueError as exc:
            raise RequestError("tool", str(exc))
        try:
            action = Action.parse(body.get("action", ""))
        except ValueError as exc:
            raise RequestError("action", str(exc))
        if "trajectory" not in body:
            raise RequestError("trajectory", "missing")
        trajectory = parse_trajectory(
            body["trajectory"], self.frames, tool.class_id
        )
        if "reference" not in body:
            raise RequestError("reference", "missing")
        ref = _decode_image_field(body["reference"], "reference")
        w, h = self.resolution
        if ref.shape[:2] != (h, w):
            raise RequestError(
                "reference",
                f"expected {w}x{h} image, got {ref.shape[1]}x{ref.shape[0]}",
            )
        if "affordance" not in body:
            raise RequestError("affordance", "missing")
        affordance = _parse_affordance(body["affordance"], "affordance")
        sampler = SamplerConfig(
            steps=self.sampler.steps,
            guidance_scale=self.sampler.guidance_scale,
            seed=self.sampler.seed,
        )
        overrides = body.get("sampler", {})
        if not isinstance(overrides, dict):
            raise RequestError("sampler", "must be an object")
        for key, value in overrides.items():
            if not hasattr(sampler, key):
                raise RequestError(f"sampler.{key}", "unknown option")
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise RequestError(f"sampler.{key}", "must be a number")
            if key in ("steps", "seed"):
                if int(value) != value:
                    raise RequestError(f"sampler.{key}", "must be an integer")
                value = int(value)
                if key == "steps" and value < 1:
                    raise RequestError("sampler.steps", "must be >= 1")
            setattr(sampler, key, float(value) if key == "guidance_scale" else value)
        return {
            "tool": tool,
            "action": action,
            "trajectory": trajectory,
            "reference": ref,
            "affordance": affordance,
            "sampler": sampler,
        }

    # -- job lifecycle --------------------------------------------------------

    def submit(self, request: dict) -> GenerationJob:
        job = GenerationJob(job_id=uuid.uuid4().hex[:12])
        job.progress_total = request["sampler"].steps
        with self.lock:
            self.jobs[job.job_id] = job
        try:
            self.queue.put_nowait((job, request))
        except queue.Full:
            with self.lock:
                del self.jobs[job.job_id]
            raise HTTPException(
                status_code=429,
                detail=f"queue full ({self.queue.maxsize} jobs waiting)",
            )
        return job

    def _drain(self):
        import time

        while True:
            job, request = self.queue.get()
            job.state = "running"
            started = time.monotonic()
            try:
                video = self._generate(job, request)
                job.frames = [
                    (np.clip(f, 0, 1) * 255.0).round().astype(np.uint8)
                    for f in video
                ]
                job.timings["seconds"] = round(time.monotonic() - started, 3)
                job.state = "done"
            except Exception as exc:   # worker must survive bad jobs
                job.error = f"{type(exc).__name__}: {exc}"
                job.timings["seconds"] = round(time.monotonic() - started, 3)
                job.state = "failed"

    def _generate(self, job: GenerationJob, request: dict) -> np.ndarray:
        bundle = conditioning_inputs(
            request["reference"],
            request["affordance"],
            request["trajectory"],
            request["tool"],
            request["action"],
            self.codec,
            self.text_encoder,
        )

        def progress(step, total):
            job.progress_step = step
            job.progress_total = total

        w, h = self.resolution
        return generate_video(
            self.model,
            self.codec,
            bundle,
            (self.frames, h, w),
            request["sampler"],
            progress=progress,
        )

    def get(self, job_id: str) -> GenerationJob:
        with self.lock:
            job = self.jobs.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"no job {job_id!r}")
        return job


def png_bytes(frame: np.ndarray) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(frame).save(buf, format="PNG")
    return buf.getvalue()


def create_app(service: GenerationService) -> FastAPI:
    app = FastAPI(title="surgvid generation service")

    @app.get("/meta")
    def meta():
        return {
            "tools": [t.value for t in Tool],
            "actions": [a.value for a in Action],
            "prompt_template": PROMPT_TEMPLATE,
            "resolution": list(service.resolution),
            "frames": service.frames,
            "steps": service.sampler.steps,
            "guidance_scale": service.sampler.guidance_scale,
        }

    @app.post("/jobs", status_code=201)
    def create_job(body: dict):
        try:
            request = service.parse_request(body)
        except RequestError as exc:
            raise HTTPException(status_code=400, detail=exc.detail())
        job = service.submit(request)
        return {"job_id": job.job_id, "state": job.state}

    @app.get("/jobs/{job_id}")
    def job_state(job_id: str):
        return service.get(job_id).public()

    @app.get("/jobs/{job_id}/frames/{index}")
    def job_frame(job_id: str, index: int):
        job = service.get(job_id)
        if job.state != "done":
            raise HTTPException(
                status_code=404,
                detail=f"job {job_id} has no frames (state={job.state})",
            )
        if not 0 <= index < len(job.frames):
            raise HTTPException(
                status_code=404,
                detail=f"frame {index} out of range [0, {len(job.frames)})",
            )
        return Response(
            content=png_bytes(job.frames[index]), media_type="image/png"
        )

    return app
