import { describe, expect, it } from "vitest";

import { RenderQueue } from "./renderQueue";
import { RenderRequest } from "./types";

function req(frame: number): RenderRequest {
  return { frame_index: frame, edits: [] };
}

// Manual timer so debounce can be stepped deterministically.
function makeTimers() {
  let pending: (() => void) | null = null;
  return {
    setTimer: (fn: () => void) => {
      pending = fn;
      return 1;
    },
    clearTimer: () => {
      pending = null;
    },
    fire: () => {
      const fn = pending;
      pending = null;
      fn?.();
    },
  };
}

describe("render queue", () => {
  it("debounces bursts into a single request", async () => {
    const timers = makeTimers();
    const sent: number[] = [];
    const queue = new RenderQueue(
      async (r) => {
        sent.push(r.frame_index);
        return new Blob();
      },
      () => {},
      () => {},
      { setTimer: timers.setTimer, clearTimer: timers.clearTimer },
    );
    queue.submit(req(0));
    queue.submit(req(1));
    queue.submit(req(2));
    timers.fire();
    await Promise.resolve();
    expect(sent).toEqual([2]);
  });

  it("caps in-flight requests at 4", async () => {
    const timers = makeTimers();
    const resolvers: ((b: Blob) => void)[] = [];
    const queue = new RenderQueue(
      () => new Promise<Blob>((resolve) => resolvers.push(resolve)),
      () => {},
      () => {},
      { setTimer: timers.setTimer, clearTimer: timers.clearTimer },
    );
    for (let i = 0; i < 6; i += 1) {
      queue.submit(req(i));
      timers.fire();
    }
    expect(queue.inFlightCount).toBe(4);
    expect(resolvers.length).toBe(4);
    resolvers[0](new Blob());
    await new Promise((r) => setTimeout(r, 0));
    // The held-back request goes out once a slot frees up.
    expect(resolvers.length).toBe(5);
  });

  it("discards stale responses by sequence number", async () => {
    const timers = makeTimers();
    const resolvers: ((b: Blob) => void)[] = [];
    const displayed: number[] = [];
    const queue = new RenderQueue(
      () => new Promise<Blob>((resolve) => resolvers.push(resolve)),
      (_blob, seq) => displayed.push(seq),
      () => {},
      { setTimer: timers.setTimer, clearTimer: timers.clearTimer },
    );
    queue.submit(req(0));
    timers.fire();
    queue.submit(req(1));
    timers.fire();
    // Newer response lands first; the older one must be dropped.
    resolvers[1](new Blob());
    await new Promise((r) => setTimeout(r, 0));
    resolvers[0](new Blob());
    await new Promise((r) => setTimeout(r, 0));
    expect(displayed).toEqual([2]);
  });

  it("routes failures to the error callback and frees the slot", async () => {
    const timers = makeTimers();
    const errors: unknown[] = [];
    const queue = new RenderQueue(
      async () => {
        throw new Error("boom");
      },
      () => {},
      (e) => errors.push(e),
      { setTimer: timers.setTimer, clearTimer: timers.clearTimer },
    );
    queue.submit(req(0));
    timers.fire();
    await new Promise((r) => setTimeout(r, 0));
    expect(errors.length).toBe(1);
    expect(queue.inFlightCount).toBe(0);
  });
});
