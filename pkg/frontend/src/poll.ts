/**
 * Job polling with a monotone progress guarantee: whatever ordering quirks
 * the transport introduces, the progress handed to the UI never moves
 * backwards.
 */

import type { ServiceClient } from "./client.js";
import type { JobState } from "./types.js";
import { POLL_INTERVAL_MS } from "./types.js";

export interface PollOptions {
  intervalMs?: number;
  onProgress?: (step: number, total: number, state: JobState) => void;
  /** Injectable for tests; defaults to setTimeout-based sleep. */
  sleep?: (ms: number) => Promise<void>;
}

export class JobFailed extends Error {
  readonly detail: string;

  constructor(jobId: string, detail: string) {
    super(`job ${jobId} failed: ${detail}`);
    this.detail = detail;
  }
}

const defaultSleep = (ms: number): Promise<void> =>
  new Promise((resolve) => setTimeout(resolve, ms));

/**
 * Poll until the job is done, reporting clamped-monotone progress along the
 * way. Resolves with the final job state; rejects with JobFailed carrying
 * the server's error detail.
 */
export async function pollJob(
  client: ServiceClient,
  jobId: string,
  options: PollOptions = {},
): Promise<JobState> {
  const intervalMs = options.intervalMs ?? POLL_INTERVAL_MS;
  const sleep = options.sleep ?? defaultSleep;
  let bestStep = 0;
  for (;;) {
    const job = await client.job(jobId);
    bestStep = Math.max(bestStep, job.progress.step);
    options.onProgress?.(bestStep, job.progress.total, job);
    if (job.state === "done") {
      return job;
    }
    if (job.state === "failed") {
      throw new JobFailed(jobId, job.error ?? "no detail");
    }
    await sleep(intervalMs);
  }
}

/** Fetch every frame of a finished job, in order. */
export async function fetchAllFrames(
  client: ServiceClient,
  jobId: string,
  frameCount: number,
): Promise<ArrayBuffer[]> {
  const frames: ArrayBuffer[] = [];
  for (let i = 0; i < frameCount; i++) {
    frames.push(await client.fetchFrame(jobId, i));
  }
  return frames;
}
