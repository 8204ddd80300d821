import { beforeEach, describe, expect, it } from "vitest";

import { createSketchStore } from "../src/state.js";
import type { SketchStore } from "../src/state.js";

let store: SketchStore;

beforeEach(() => {
  store = createSketchStore();
  store.setReference({ imageB64: "eA==", width: 128, height: 72 });
});

describe("keypoint invariants", () => {
  it("keeps frames strictly increasing regardless of insertion order", () => {
    store.addKeypoint(40, 50, 30);
    store.addKeypoint(0, 10, 10);
    store.addKeypoint(80, 120, 60);
    expect(store.state.keypoints.map((k) => k.frame)).toEqual([0, 40, 80]);
  });

  it("rejects duplicate frames and out-of-range values", () => {
    store.addKeypoint(10, 5, 5);
    expect(() => store.addKeypoint(10, 50, 50)).toThrow(/already has/);
    expect(() => store.addKeypoint(81, 5, 5)).toThrow(/\[0, 80\]/);
    expect(() => store.addKeypoint(-1, 5, 5)).toThrow(/\[0, 80\]/);
    expect(() => store.addKeypoint(5.5, 5, 5)).toThrow(/integer/);
    expect(() => store.addKeypoint(20, 128, 5)).toThrow(/outside/);
    expect(store.state.keypoints).toHaveLength(1);
  });

  it("moves and removes by index with bounds checks", () => {
    store.addKeypoint(0, 10, 10);
    store.addKeypoint(80, 20, 20);
    store.moveKeypoint(1, 64, 32);
    expect(store.state.keypoints[1]).toEqual({ frame: 80, x: 64, y: 32 });
    expect(() => store.moveKeypoint(1, 200, 32)).toThrow(/outside/);
    store.removeKeypoint(0);
    expect(store.state.keypoints.map((k) => k.frame)).toEqual([80]);
    expect(() => store.removeKeypoint(5)).toThrow(/no keypoint/);
  });
});

describe("affordance layer", () => {
  it("paints and erases binary disks on the reference grid", () => {
    store.paintAffordance(64, 36, 3);
    const painted = store.state.affordance.reduce((a, b) => a + b, 0);
    expect(painted).toBeGreaterThan(20);
    expect(new Set(store.state.affordance).size).toBeLessThanOrEqual(2);
    expect(store.state.affordance[36 * 128 + 64]).toBe(1);

    store.paintAffordance(64, 36, 3, true);
    expect(store.state.affordance.every((v) => v === 0)).toBe(true);
  });

  it("clips the brush at the grid edge", () => {
    store.paintAffordance(0, 0, 4);
    expect(store.state.affordance[0]).toBe(1);
  });

  it("resets the layer when a new reference arrives", () => {
    store.paintAffordance(64, 36, 3);
    store.addKeypoint(0, 10, 10);
    store.setReference({ imageB64: "eQ==", width: 64, height: 64 });
    expect(store.state.affordance).toHaveLength(64 * 64);
    expect(store.state.affordance.every((v) => v === 0)).toBe(true);
    expect(store.state.keypoints).toHaveLength(0);
  });
});

describe("result rotation", () => {
  it("keeps the previous result for the compare pane", () => {
    store.storeResult({ jobId: "a", frameCount: 81, frameUrls: [] });
    expect(store.state.previousResult).toBeNull();
    store.storeResult({ jobId: "b", frameCount: 81, frameUrls: [] });
    expect(store.state.result?.jobId).toBe("b");
    expect(store.state.previousResult?.jobId).toBe("a");
  });

  it("notifies subscribers on every mutation and supports unsubscribe", () => {
    let calls = 0;
    const off = store.subscribe(() => {
      calls += 1;
    });
    store.setTool("hook");
    store.setAction("cutting");
    off();
    store.setTool("clipper");
    expect(calls).toBe(2);
    expect(store.state.lastJobId).toBeNull();
    store.recordSubmission("j9");
    expect(store.state.lastJobId).toBe("j9");
  });
});
