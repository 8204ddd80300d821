/**
 * Framework-free playback model: a frame clock that loops an 81-frame clip
 * at 25 fps. The DOM layer feeds it elapsed time and paints whatever frame
 * index it reports; the scrubber writes through seek().
 */

import { CLIP_FRAMES, PLAYBACK_FPS } from "./types.js";

export interface Player {
  readonly frameCount: number;
  readonly fps: number;
  frame: number;
  playing: boolean;
  play(): void;
  pause(): void;
  /** Clamp-seek to a frame and report where the clock actually landed. */
  seek(frame: number): number;
  /** Advance the clock by elapsed milliseconds; returns the current frame. */
  advance(elapsedMs: number): number;
}

export function createPlayer(
  frameCount: number = CLIP_FRAMES,
  fps: number = PLAYBACK_FPS,
): Player {
  if (!Number.isInteger(frameCount) || frameCount < 1) {
    throw new Error(`frame count must be a positive integer, got ${frameCount}`);
  }
  const frameMs = 1000 / fps;
  let residualMs = 0;

  const player: Player = {
    frameCount,
    fps,
    frame: 0,
    playing: false,

    play(): void {
      player.playing = true;
    },

    pause(): void {
      player.playing = false;
      residualMs = 0;
    },

    seek(frame: number): number {
      const clamped = Math.min(frameCount - 1, Math.max(0, Math.round(frame)));
      player.frame = clamped;
      residualMs = 0;
      return clamped;
    },

    advance(elapsedMs: number): number {
      if (!player.playing || elapsedMs < 0) {
        return player.frame;
      }
      residualMs += elapsedMs;
      const steps = Math.floor(residualMs / frameMs);
      if (steps > 0) {
        residualMs -= steps * frameMs;
        player.frame = (player.frame + steps) % frameCount;
      }
      return player.frame;
    },
  };
  return player;
}
