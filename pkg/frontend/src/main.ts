/**
 * DOM wiring for the sketch studio: one canvas for authoring over the
 * reference frame, one for playback, a compare pane, and the submit/poll
 * loop against the generation service. All state lives in the store; this
 * file only translates events in and paints state out.
 */

import { createClient, RequestRejected } from "./client.js";
import { canvasToSource, sourceToCanvas, trajectoryAt } from "./geometry.js";
import { fetchAllFrames, JobFailed, pollJob } from "./poll.js";
import { createPlayer } from "./playback.js";
import { createSketchStore } from "./state.js";
import { exportRequest, ValidationError, validateSketch } from "./export.js";
import type { Action, FieldErrors, MetaResponse, Tool } from "./types.js";
import { CLIP_FRAMES } from "./types.js";

const BRUSH_RADIUS = 3; // source pixels

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) {
    throw new Error(`missing #${id}`);
  }
  return node as T;
}

const sketchCanvas = el<HTMLCanvasElement>("sketch");
const playCanvas = el<HTMLCanvasElement>("playback");
const compareCanvas = el<HTMLCanvasElement>("compare");
const frameSlider = el<HTMLInputElement>("frame-slider");
const frameLabel = el<HTMLSpanElement>("frame-label");
const scrubber = el<HTMLInputElement>("scrubber");
const toolSelect = el<HTMLSelectElement>("tool");
const actionSelect = el<HTMLSelectElement>("action");
const fileInput = el<HTMLInputElement>("reference-file");
const modeTrajectory = el<HTMLInputElement>("mode-trajectory");
const brushErase = el<HTMLInputElement>("brush-erase");
const submitButton = el<HTMLButtonElement>("submit");
const playButton = el<HTMLButtonElement>("play");
const progressBar = el<HTMLProgressElement>("progress");
const statusLine = el<HTMLSpanElement>("status");
const errorPanel = el<HTMLDivElement>("errors");

const store = createSketchStore();
const client = createClient("");
const player = createPlayer();

let meta: MetaResponse | null = null;
let resultFrames: HTMLImageElement[] = [];
let compareFrame: HTMLImageElement | null = null;

// --- reference loading -------------------------------------------------------

async function loadReference(file: File): Promise<void> {
  if (!meta) {
    return;
  }
  const [width, height] = meta.resolution;
  const bitmap = await createImageBitmap(file);
  const off = document.createElement("canvas");
  off.width = width;
  off.height = height;
  const ctx = off.getContext("2d")!;
  ctx.drawImage(bitmap, 0, 0, width, height);
  const dataUrl = off.toDataURL("image/png");
  store.setReference({
    imageB64: dataUrl.slice(dataUrl.indexOf(",") + 1),
    width,
    height,
  });
}

// --- authoring canvas ---------------------------------------------------------

function pointerToSource(event: PointerEvent): { x: number; y: number } {
  const ref = store.state.reference!;
  const rect = sketchCanvas.getBoundingClientRect();
  return canvasToSource(
    event.clientX - rect.left,
    event.clientY - rect.top,
    { width: rect.width, height: rect.height },
    { width: ref.width, height: ref.height },
  );
}

let painting = false;

sketchCanvas.addEventListener("pointerdown", (event) => {
  if (!store.state.reference) {
    return;
  }
  const point = pointerToSource(event);
  if (modeTrajectory.checked) {
    try {
      store.addKeypoint(Number(frameSlider.value), point.x, point.y);
    } catch (error) {
      statusLine.textContent = String((error as Error).message);
    }
  } else {
    painting = true;
    store.paintAffordance(point.x, point.y, BRUSH_RADIUS, brushErase.checked);
  }
});

sketchCanvas.addEventListener("pointermove", (event) => {
  if (painting && store.state.reference) {
    const point = pointerToSource(event);
    store.paintAffordance(point.x, point.y, BRUSH_RADIUS, brushErase.checked);
  }
});

window.addEventListener("pointerup", () => {
  painting = false;
});

function drawSketch(): void {
  const ctx = sketchCanvas.getContext("2d")!;
  ctx.clearRect(0, 0, sketchCanvas.width, sketchCanvas.height);
  const ref = store.state.reference;
  if (!ref) {
    ctx.fillStyle = "#888";
    ctx.fillText("load a reference frame", 16, 24);
    return;
  }
  const canvasSize = { width: sketchCanvas.width, height: sketchCanvas.height };
  const sourceSize = { width: ref.width, height: ref.height };
  const image = new Image();
  image.onload = () => {
    ctx.drawImage(image, 0, 0, canvasSize.width, canvasSize.height);
    // affordance overlay
    ctx.fillStyle = "rgba(80, 200, 120, 0.35)";
    const sx = canvasSize.width / ref.width;
    const sy = canvasSize.height / ref.height;
    for (let y = 0; y < ref.height; y++) {
      for (let x = 0; x < ref.width; x++) {
        if (store.state.affordance[y * ref.width + x]) {
          ctx.fillRect(x * sx, y * sy, sx, sy);
        }
      }
    }
    // fading interpolated path up to the slider frame
    const kps = store.state.keypoints;
    if (kps.length >= 1) {
      const current = Number(frameSlider.value);
      for (let f = 0; f <= current; f++) {
        const p = trajectoryAt(kps, f);
        const c = sourceToCanvas(p.x, p.y, canvasSize, sourceSize);
        ctx.fillStyle = `rgba(255, 200, 0, ${0.15 + (0.85 * f) / CLIP_FRAMES})`;
        ctx.beginPath();
        ctx.arc(c.x, c.y, 3, 0, 2 * Math.PI);
        ctx.fill();
      }
      ctx.fillStyle = "#ff3333";
      for (const kp of kps) {
        const c = sourceToCanvas(kp.x, kp.y, canvasSize, sourceSize);
        ctx.beginPath();
        ctx.arc(c.x, c.y, 5, 0, 2 * Math.PI);
        ctx.fill();
      }
    }
  };
  image.src = `data:image/png;base64,${ref.imageB64}`;
}

// --- validation panel ----------------------------------------------------------

function showErrors(errors: FieldErrors): void {
  errorPanel.replaceChildren();
  for (const [field, message] of Object.entries(errors)) {
    const row = document.createElement("div");
    row.className = "error-row";
    row.textContent = `${field}: ${message}`;
    errorPanel.appendChild(row);
  }
}

// --- submit / poll / play -------------------------------------------------------

async function submit(): Promise<void> {
  try {
    const body = exportRequest(store.state);
    showErrors({});
    submitButton.disabled = true;
    statusLine.textContent = "submitting…";
    const { job_id } = await client.submit(body);
    store.recordSubmission(job_id);
    statusLine.textContent = `job ${job_id}`;
    const done = await pollJob(client, job_id, {
      onProgress: (step, total) => {
        progressBar.max = total;
        progressBar.value = step;
        statusLine.textContent = `job ${job_id}: step ${step}/${total}`;
      },
    });
    const frameCount = done.frames ?? CLIP_FRAMES;
    const buffers = await fetchAllFrames(client, job_id, frameCount);
    await installResult(job_id, buffers);
    statusLine.textContent = `job ${job_id}: done (${frameCount} frames)`;
  } catch (error) {
    if (error instanceof ValidationError || error instanceof RequestRejected) {
      showErrors(error.fields);
      statusLine.textContent = "fix the highlighted fields";
    } else if (error instanceof JobFailed) {
      showErrors({ job: error.detail });
      statusLine.textContent = "generation failed";
    } else {
      statusLine.textContent = String((error as Error).message);
    }
  } finally {
    submitButton.disabled = false;
  }
}

async function installResult(jobId: string, buffers: ArrayBuffer[]): Promise<void> {
  // Rotate the old frames into the compare pane before replacing them.
  if (resultFrames.length > 0) {
    compareFrame = resultFrames[Math.floor(resultFrames.length / 2)] ?? null;
  }
  resultFrames = await Promise.all(
    buffers.map(
      (buffer) =>
        new Promise<HTMLImageElement>((resolve, reject) => {
          const image = new Image();
          image.onload = () => resolve(image);
          image.onerror = reject;
          image.src = URL.createObjectURL(new Blob([buffer], { type: "image/png" }));
        }),
    ),
  );
  store.storeResult({
    jobId,
    frameCount: resultFrames.length,
    frameUrls: resultFrames.map((f) => f.src),
  });
  scrubber.max = String(resultFrames.length - 1);
  player.seek(0);
  player.play();
  drawCompare();
}

function drawCompare(): void {
  const ctx = compareCanvas.getContext("2d")!;
  ctx.clearRect(0, 0, compareCanvas.width, compareCanvas.height);
  if (compareFrame) {
    ctx.drawImage(compareFrame, 0, 0, compareCanvas.width, compareCanvas.height);
  }
}

let lastTick = performance.now();

function renderLoop(now: number): void {
  const frame = player.advance(now - lastTick);
  lastTick = now;
  const image = resultFrames[frame];
  if (image) {
    const ctx = playCanvas.getContext("2d")!;
    ctx.drawImage(image, 0, 0, playCanvas.width, playCanvas.height);
    scrubber.value = String(frame);
  }
  requestAnimationFrame(renderLoop);
}

// --- boot -----------------------------------------------------------------------

async function boot(): Promise<void> {
  meta = await client.meta();
  for (const tool of meta.tools) {
    toolSelect.add(new Option(tool, tool));
  }
  for (const action of meta.actions) {
    actionSelect.add(new Option(action, action));
  }
  frameSlider.max = String(meta.frames - 1);
  store.subscribe(() => {
    drawSketch();
    showErrors(validateSketch(store.state));
  });
  drawSketch();
  requestAnimationFrame(renderLoop);
}

fileInput.addEventListener("change", () => {
  const file = fileInput.files?.[0];
  if (file) {
    void loadReference(file);
  }
});
toolSelect.addEventListener("change", () => store.setTool(toolSelect.value as Tool));
actionSelect.addEventListener("change", () =>
  store.setAction(actionSelect.value as Action),
);
frameSlider.addEventListener("input", () => {
  frameLabel.textContent = frameSlider.value;
  drawSketch();
});
scrubber.addEventListener("input", () => {
  player.pause();
  player.seek(Number(scrubber.value));
});
playButton.addEventListener("click", () => {
  if (player.playing) {
    player.pause();
    playButton.textContent = "play";
  } else {
    player.play();
    playButton.textContent = "pause";
  }
});
submitButton.addEventListener("click", () => void submit());

void boot();
