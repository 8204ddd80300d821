/**
 * Sketch -> service request body, and the inverse used for request
 * inspection and round-trip checks. Validation mirrors every server rule
 * we can evaluate locally, so a body that leaves this module is never
 * rejected for a reason the UI could have caught.
 */

import { decodeRle, encodeRle } from "./rle.js";
import type {
  FieldErrors,
  GenerationRequest,
  Keypoint,
  SketchState,
} from "./types.js";
import { ACTIONS, CLIP_FRAMES, TOOLS } from "./types.js";

export class ValidationError extends Error {
  readonly fields: FieldErrors;

  constructor(fields: FieldErrors) {
    super(Object.values(fields).join("; "));
    this.fields = fields;
  }
}

/** Every locally checkable problem, keyed by the field it belongs to. */
export function validateSketch(state: SketchState): FieldErrors {
  const errors: FieldErrors = {};
  if (!state.reference) {
    errors.reference = "load a reference image";
  }
  if (!state.tool || !TOOLS.includes(state.tool)) {
    errors.tool = "pick a tool";
  }
  if (!state.action || !ACTIONS.includes(state.action)) {
    errors.action = "pick an action";
  }
  const trajectoryError = validateKeypoints(state.keypoints, state.reference);
  if (trajectoryError) {
    errors.trajectory = trajectoryError;
  }
  if (!state.affordance.some((v) => v === 1)) {
    errors.affordance = "paint the affordance region";
  }
  return errors;
}

function validateKeypoints(
  keypoints: Keypoint[],
  reference: SketchState["reference"],
): string | null {
  if (keypoints.length < 2) {
    return "need at least 2 keypoints";
  }
  let last = -1;
  for (const kp of keypoints) {
    if (!Number.isInteger(kp.frame) || kp.frame < 0 || kp.frame >= CLIP_FRAMES) {
      return `keypoint frame ${kp.frame} outside [0, ${CLIP_FRAMES - 1}]`;
    }
    if (kp.frame <= last) {
      return "keypoint frames must be strictly increasing";
    }
    last = kp.frame;
    if (reference) {
      const inside =
        kp.x >= 0 && kp.x < reference.width && kp.y >= 0 && kp.y < reference.height;
      if (!inside) {
        return `keypoint (${kp.x}, ${kp.y}) outside the reference grid`;
      }
    }
  }
  return null;
}

/**
 * Build the POST /jobs body. Keypoints are already in source pixels, so the
 * declared canvas is the reference grid itself and coordinates pass through
 * untouched.
 */
export function exportRequest(state: SketchState): GenerationRequest {
  const errors = validateSketch(state);
  if (Object.keys(errors).length > 0) {
    throw new ValidationError(errors);
  }
  const ref = state.reference!;
  return {
    tool: state.tool!,
    action: state.action!,
    trajectory: {
      canvas: { width: ref.width, height: ref.height },
      points: state.keypoints.map((k) => ({ frame: k.frame, x: k.x, y: k.y })),
    },
    reference: { image_b64: ref.imageB64 },
    affordance: {
      rle: {
        runs: encodeRle(state.affordance),
        height: ref.height,
        width: ref.width,
      },
    },
  };
}

export interface ParsedRequest {
  tool: string;
  action: string;
  canvas: { width: number; height: number };
  keypoints: Keypoint[];
  affordance: Uint8Array;
  referenceB64: string;
}

/** Inverse of exportRequest for round-trip checks and request inspection. */
export function parseRequest(body: GenerationRequest): ParsedRequest {
  const { runs, height, width } = body.affordance.rle;
  return {
    tool: body.tool,
    action: body.action,
    canvas: { ...body.trajectory.canvas },
    keypoints: body.trajectory.points.map((p) => ({ ...p })),
    affordance: decodeRle(runs, height, width),
    referenceB64: body.reference.image_b64,
  };
}
