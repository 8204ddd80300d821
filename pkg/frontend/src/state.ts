/**
 * The single session store. Every mutation flows through here, and the
 * trajectory/affordance invariants are enforced at the mutation boundary
 * so downstream code (export, preview, submit) can trust the state.
 */

import type {
  Action,
  GenerationResult,
  Keypoint,
  ReferenceImage,
  SketchState,
  Tool,
} from "./types.js";
import { CLIP_FRAMES } from "./types.js";

export type Listener = (state: SketchState) => void;

export interface SketchStore {
  state: SketchState;
  subscribe(listener: Listener): () => void;
  setReference(ref: ReferenceImage): void;
  setTool(tool: Tool): void;
  setAction(action: Action): void;
  /** Insert a keypoint; rejects out-of-range or duplicate frames. */
  addKeypoint(frame: number, x: number, y: number): void;
  moveKeypoint(index: number, x: number, y: number): void;
  removeKeypoint(index: number): void;
  clearKeypoints(): void;
  /** Paint (or erase) a filled disk onto the affordance layer. */
  paintAffordance(cx: number, cy: number, radius: number, erase?: boolean): void;
  clearAffordance(): void;
  recordSubmission(jobId: string): void;
  /** Install a finished result, rotating the old one into the compare pane. */
  storeResult(result: GenerationResult): void;
}

export function createSketchStore(): SketchStore {
  const state: SketchState = {
    reference: null,
    keypoints: [],
    affordance: new Uint8Array(0),
    tool: null,
    action: null,
    lastJobId: null,
    result: null,
    previousResult: null,
  };
  const listeners = new Set<Listener>();

  function emit(): void {
    for (const listener of listeners) {
      listener(state);
    }
  }

  function requireReference(): ReferenceImage {
    if (!state.reference) {
      throw new Error("load a reference image first");
    }
    return state.reference;
  }

  return {
    state,

    subscribe(listener: Listener): () => void {
      listeners.add(listener);
      return () => listeners.delete(listener);
    },

    setReference(ref: ReferenceImage): void {
      state.reference = ref;
      // The paint layer shares the reference pixel grid; a new grid
      // invalidates both it and the authored path.
      state.affordance = new Uint8Array(ref.width * ref.height);
      state.keypoints = [];
      emit();
    },

    setTool(tool: Tool): void {
      state.tool = tool;
      emit();
    },

    setAction(action: Action): void {
      state.action = action;
      emit();
    },

    addKeypoint(frame: number, x: number, y: number): void {
      const ref = requireReference();
      if (!Number.isInteger(frame) || frame < 0 || frame >= CLIP_FRAMES) {
        throw new Error(`frame must be an integer in [0, ${CLIP_FRAMES - 1}]`);
      }
      if (state.keypoints.some((k) => k.frame === frame)) {
        throw new Error(`frame ${frame} already has a keypoint`);
      }
      if (!(x >= 0 && x < ref.width && y >= 0 && y < ref.height)) {
        throw new Error(`(${x}, ${y}) outside ${ref.width}x${ref.height}`);
      }
      state.keypoints.push({ frame, x, y });
      state.keypoints.sort((a, b) => a.frame - b.frame);
      emit();
    },

    moveKeypoint(index: number, x: number, y: number): void {
      const ref = requireReference();
      const kp = state.keypoints[index];
      if (!kp) {
        throw new Error(`no keypoint at index ${index}`);
      }
      if (!(x >= 0 && x < ref.width && y >= 0 && y < ref.height)) {
        throw new Error(`(${x}, ${y}) outside ${ref.width}x${ref.height}`);
      }
      kp.x = x;
      kp.y = y;
      emit();
    },

    removeKeypoint(index: number): void {
      if (index < 0 || index >= state.keypoints.length) {
        throw new Error(`no keypoint at index ${index}`);
      }
      state.keypoints.splice(index, 1);
      emit();
    },

    clearKeypoints(): void {
      state.keypoints = [];
      emit();
    },

    paintAffordance(cx: number, cy: number, radius: number, erase = false): void {
      const ref = requireReference();
      const value = erase ? 0 : 1;
      const r2 = radius * radius;
      const x0 = Math.max(0, Math.floor(cx - radius));
      const x1 = Math.min(ref.width - 1, Math.ceil(cx + radius));
      const y0 = Math.max(0, Math.floor(cy - radius));
      const y1 = Math.min(ref.height - 1, Math.ceil(cy + radius));
      for (let y = y0; y <= y1; y++) {
        for (let x = x0; x <= x1; x++) {
          if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r2) {
            state.affordance[y * ref.width + x] = value;
          }
        }
      }
      emit();
    },

    clearAffordance(): void {
      state.affordance.fill(0);
      emit();
    },

    recordSubmission(jobId: string): void {
      state.lastJobId = jobId;
      emit();
    },

    storeResult(result: GenerationResult): void {
      if (state.result) {
        state.previousResult = state.result;
      }
      state.result = result;
      emit();
    },
  };
}
