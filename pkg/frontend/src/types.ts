/**
 * Shared domain types. The request/response shapes mirror the generation
 * service's JSON contract field for field; nothing here may drift from it.
 */

export type Tool = "grasper" | "hook" | "clipper" | "scissors";
export type Action = "clipping" | "grasping" | "cutting" | "dissecting";

export const TOOLS: readonly Tool[] = ["grasper", "hook", "clipper", "scissors"];
export const ACTIONS: readonly Action[] = [
  "clipping",
  "grasping",
  "cutting",
  "dissecting",
];

/** One authored trajectory keypoint, in source-resolution pixels. */
export interface Keypoint {
  frame: number;
  x: number;
  y: number;
}

/** Reference frame as stored: PNG bytes (base64) plus its pixel grid. */
export interface ReferenceImage {
  imageB64: string;
  width: number;
  height: number;
}

/** Result of one finished generation, kept for playback and compare. */
export interface GenerationResult {
  jobId: string;
  frameCount: number;
  /** Object/data URLs, one per frame, in order. */
  frameUrls: string[];
}

export interface SketchState {
  reference: ReferenceImage | null;
  keypoints: Keypoint[];
  /** Binary paint layer on the reference pixel grid, row-major. */
  affordance: Uint8Array;
  tool: Tool | null;
  action: Action | null;
  lastJobId: string | null;
  result: GenerationResult | null;
  /** Retained previous result for compare-and-resketch. */
  previousResult: GenerationResult | null;
}

// --- service wire formats ---------------------------------------------------

export interface TrajectoryRequest {
  canvas: { width: number; height: number };
  points: Keypoint[];
}

export interface AffordanceRequest {
  rle: { runs: number[]; height: number; width: number };
}

export interface GenerationRequest {
  tool: Tool;
  action: Action;
  trajectory: TrajectoryRequest;
  reference: { image_b64: string };
  affordance: AffordanceRequest;
  sampler?: { steps?: number; guidance_scale?: number; seed?: number };
}

export interface SubmitResponse {
  job_id: string;
  state: string;
}

export type JobStateName = "queued" | "running" | "done" | "failed";

export interface JobState {
  id: string;
  state: JobStateName;
  progress: { step: number; total: number };
  timings: Record<string, number>;
  error?: string;
  frames?: number;
}

export interface MetaResponse {
  tools: string[];
  actions: string[];
  prompt_template: string;
  /** [width, height] of the generator's source resolution. */
  resolution: [number, number];
  frames: number;
  steps: number;
  guidance_scale: number;
}

/** Field-path -> message, as returned in 400 bodies and raised locally. */
export type FieldErrors = Record<string, string>;

/** Total frame count every generated clip carries. */
export const CLIP_FRAMES = 81;
export const PLAYBACK_FPS = 25;
export const POLL_INTERVAL_MS = 500;
