/**
 * Thin HTTP client for the generation service. The fetch implementation is
 * injectable so tests run against a scripted stub instead of a live server.
 */

import type {
  FieldErrors,
  GenerationRequest,
  JobState,
  MetaResponse,
  SubmitResponse,
} from "./types.js";

export interface FetchResponse {
  ok: boolean;
  status: number;
  json(): Promise<unknown>;
  arrayBuffer(): Promise<ArrayBuffer>;
}

export type FetchLike = (
  url: string,
  init?: { method?: string; headers?: Record<string, string>; body?: string },
) => Promise<FetchResponse>;

/** Server-side 400 with the offending field, mirrored from the response. */
export class RequestRejected extends Error {
  readonly fields: FieldErrors;

  constructor(fields: FieldErrors) {
    super(Object.values(fields).join("; ") || "request rejected");
    this.fields = fields;
  }
}

export interface ServiceClient {
  meta(): Promise<MetaResponse>;
  submit(request: GenerationRequest): Promise<SubmitResponse>;
  job(jobId: string): Promise<JobState>;
  frameUrl(jobId: string, index: number): string;
  fetchFrame(jobId: string, index: number): Promise<ArrayBuffer>;
}

export function createClient(baseUrl: string, fetchFn?: FetchLike): ServiceClient {
  const base = baseUrl.replace(/\/$/, "");
  const doFetch: FetchLike =
    fetchFn ?? (globalThis.fetch as unknown as FetchLike);

  async function expectJson(response: FetchResponse): Promise<unknown> {
    if (response.status === 400) {
      const body = (await response.json()) as { detail?: { field?: string; message?: string } };
      const field = body.detail?.field ?? "";
      throw new RequestRejected({ [field]: body.detail?.message ?? "rejected" });
    }
    if (!response.ok) {
      const body = (await response.json().catch(() => null)) as
        | { detail?: string }
        | null;
      throw new Error(body?.detail ?? `HTTP ${response.status}`);
    }
    return response.json();
  }

  return {
    async meta(): Promise<MetaResponse> {
      return (await expectJson(await doFetch(`${base}/meta`))) as MetaResponse;
    },

    async submit(request: GenerationRequest): Promise<SubmitResponse> {
      const response = await doFetch(`${base}/jobs`, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(request),
      });
      return (await expectJson(response)) as SubmitResponse;
    },

    async job(jobId: string): Promise<JobState> {
      const response = await doFetch(`${base}/jobs/${jobId}`);
      return (await expectJson(response)) as JobState;
    },

    frameUrl(jobId: string, index: number): string {
      return `${base}/jobs/${jobId}/frames/${index}`;
    },

    async fetchFrame(jobId: string, index: number): Promise<ArrayBuffer> {
      const response = await doFetch(this.frameUrl(jobId, index));
      if (!response.ok) {
        throw new Error(`frame ${index}: HTTP ${response.status}`);
      }
      return response.arrayBuffer();
    },
  };
}
