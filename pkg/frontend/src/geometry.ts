/**
 * Coordinate mapping between the on-screen canvas and the generator's
 * source pixel grid, plus the linear keypoint interpolation used for the
 * trajectory preview. Keypoints are stored in source coordinates from the
 * moment they are authored, so exports never re-round.
 */

import type { Keypoint } from "./types.js";

export interface Size {
  width: number;
  height: number;
}

export function canvasToSource(
  x: number,
  y: number,
  canvas: Size,
  source: Size,
): { x: number; y: number } {
  return {
    x: x * (source.width / canvas.width),
    y: y * (source.height / canvas.height),
  };
}

export function sourceToCanvas(
  x: number,
  y: number,
  canvas: Size,
  source: Size,
): { x: number; y: number } {
  return {
    x: x * (canvas.width / source.width),
    y: y * (canvas.height / source.height),
  };
}

/**
 * Position at a fractional frame along the keypoint polyline: linear
 * between keyframes, held constant before the first and after the last —
 * the same expansion the sampler applies server-side.
 */
export function trajectoryAt(keypoints: Keypoint[], frame: number): { x: number; y: number } {
  if (keypoints.length === 0) {
    throw new Error("no keypoints");
  }
  const sorted = [...keypoints].sort((a, b) => a.frame - b.frame);
  const first = sorted[0]!;
  const last = sorted[sorted.length - 1]!;
  if (frame <= first.frame) {
    return { x: first.x, y: first.y };
  }
  if (frame >= last.frame) {
    return { x: last.x, y: last.y };
  }
  for (let i = 1; i < sorted.length; i++) {
    const b = sorted[i]!;
    if (frame <= b.frame) {
      const a = sorted[i - 1]!;
      const t = (frame - a.frame) / (b.frame - a.frame);
      return { x: a.x + t * (b.x - a.x), y: a.y + t * (b.y - a.y) };
    }
  }
  return { x: last.x, y: last.y };
}
