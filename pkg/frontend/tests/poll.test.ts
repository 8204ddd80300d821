import { describe, expect, it } from "vitest";

import { createClient, RequestRejected } from "../src/client.js";
import type { FetchLike, FetchResponse } from "../src/client.js";
import { fetchAllFrames, JobFailed, pollJob } from "../src/poll.js";
import { createPlayer } from "../src/playback.js";
import type { JobState } from "../src/types.js";

function jsonResponse(status: number, body: unknown): FetchResponse {
  return {
    ok: status >= 200 && status < 300,
    status,
    json: async () => body,
    arrayBuffer: async () => new ArrayBuffer(0),
  };
}

function pngResponse(byte: number): FetchResponse {
  return {
    ok: true,
    status: 200,
    json: async () => {
      throw new Error("not json");
    },
    arrayBuffer: async () => Uint8Array.from([byte]).buffer,
  };
}

/**
 * Scripted stand-in for the generation service: answers GET /jobs/{id} from
 * a queue of states and serves one tiny "PNG" per frame index.
 */
function stubServer(states: Array<Partial<JobState>>, frameCount = 81): FetchLike {
  let cursor = 0;
  return async (url, init) => {
    const method = init?.method ?? "GET";
    const frameMatch = url.match(/\/jobs\/j1\/frames\/(\d+)$/);
    if (frameMatch) {
      const index = Number(frameMatch[1]);
      if (index >= frameCount) {
        return jsonResponse(404, { detail: `frame ${index} out of range` });
      }
      return pngResponse(index % 251);
    }
    if (method === "GET" && url.endsWith("/jobs/j1")) {
      const state = states[Math.min(cursor, states.length - 1)]!;
      cursor += 1;
      return jsonResponse(200, {
        id: "j1",
        state: "running",
        progress: { step: 0, total: 50 },
        timings: {},
        ...state,
      });
    }
    return jsonResponse(404, { detail: `no route ${method} ${url}` });
  };
}

const instant = async (): Promise<void> => {};

describe("job polling", () => {
  it("reports monotone nondecreasing progress even when the transport jitters", async () => {
    const client = createClient("http://stub", stubServer([
      { progress: { step: 0, total: 50 } },
      { progress: { step: 10, total: 50 } },
      { progress: { step: 4, total: 50 } },   // out-of-order poll
      { progress: { step: 30, total: 50 } },
      { progress: { step: 27, total: 50 } },
      { state: "done", progress: { step: 50, total: 50 }, frames: 81 },
    ]));
    const seen: number[] = [];
    const done = await pollJob(client, "j1", {
      sleep: instant,
      onProgress: (step) => seen.push(step),
    });
    expect(seen).toEqual([0, 10, 10, 30, 30, 50]);
    for (let i = 1; i < seen.length; i++) {
      expect(seen[i]!).toBeGreaterThanOrEqual(seen[i - 1]!);
    }
    expect(done.state).toBe("done");
    expect(done.frames).toBe(81);
  });

  it("plays back exactly 81 fetched frames, then loops", async () => {
    const client = createClient("http://stub", stubServer([
      { state: "done", progress: { step: 50, total: 50 }, frames: 81 },
    ]));
    const done = await pollJob(client, "j1", { sleep: instant });
    const frames = await fetchAllFrames(client, "j1", done.frames!);
    expect(frames).toHaveLength(81);
    expect(new Uint8Array(frames[80]!)[0]).toBe(80 % 251);

    const player = createPlayer(frames.length, 25);
    player.play();
    const visited = new Set<number>([player.frame]);
    for (let tick = 0; tick < 81; tick++) {
      visited.add(player.advance(40)); // 40 ms = one frame at 25 fps
    }
    expect(visited.size).toBe(81);     // every frame shown once per loop
    expect(player.frame).toBe(0);      // wrapped around after the 81st
  });

  it("rejects with the server's error detail on a failed job", async () => {
    const client = createClient("http://stub", stubServer([
      { progress: { step: 3, total: 50 } },
      { state: "failed", error: "sampling diverged at step 4/50" },
    ]));
    await expect(pollJob(client, "j1", { sleep: instant })).rejects.toThrow(JobFailed);
    await expect(
      pollJob(client, "j1", { sleep: instant }),
    ).rejects.toMatchObject({ detail: "sampling diverged at step 4/50" });
  });

  it("surfaces 400 rejections with the offending field", async () => {
    const fetchFn: FetchLike = async () =>
      jsonResponse(400, {
        detail: { field: "trajectory.points[1].frame", message: "must be an integer" },
      });
    const client = createClient("http://stub", fetchFn);
    await expect(
      client.submit({} as never),
    ).rejects.toMatchObject({
      fields: { "trajectory.points[1].frame": "must be an integer" },
    });
    await expect(client.submit({} as never)).rejects.toBeInstanceOf(RequestRejected);
  });
});
