import { describe, expect, it } from "vitest";

import { FetchLike, ServiceClient, ServiceError } from "./api";

function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}

const meta = {
  width: 64,
  height: 64,
  frames: [{ index: 0, split: "train", timestamp: 0 }],
  objects: [1, 2],
  bounds_min: [0, 0, 0],
  bounds_max: [1, 1, 1],
};

describe("service client", () => {
  it("loads scene metadata and surfaces the object list", async () => {
    const client = new ServiceClient("", async () => jsonResponse(meta));
    const scene = await client.scene();
    expect(scene.objects).toEqual([1, 2]);
    expect(scene.frames.length).toBe(1);
  });

  it("rejects malformed metadata with a schema error", async () => {
    const client = new ServiceClient(
      "",
      async () => jsonResponse({ width: "wat" }),
    );
    await expect(client.scene()).rejects.toThrow(/schema/);
  });

  it("posts render requests with the edits in the body", async () => {
    const bodies: string[] = [];
    const fakeFetch: FetchLike = async (url, init) => {
      if (url.endsWith("/api/render")) {
        bodies.push(String(init?.body));
        return new Response(new Blob([new Uint8Array([1])]), { status: 200 });
      }
      return jsonResponse(meta);
    };
    const client = new ServiceClient("", fakeFetch);
    await client.render({
      frame_index: 0,
      edits: [{ kind: "ego_lateral_shift", meters: 2.0 }],
    });
    const body = JSON.parse(bodies[0]) as { edits: { meters: number }[] };
    expect(body.edits[0]).toEqual({ kind: "ego_lateral_shift", meters: 2.0 });
  });

  it("raises ServiceError with the server message", async () => {
    const client = new ServiceClient(
      "",
      async () =>
        jsonResponse({ code: 404, message: "unknown object id 9" }, 404),
    );
    await expect(
      client.putTrajectory(9, [1, 0, 0]),
    ).rejects.toThrowError(ServiceError);
    await expect(client.putTrajectory(9, [1, 0, 0])).rejects.toThrow(
      /unknown object id 9/,
    );
  });

  it("health returns false when the service is unreachable", async () => {
    const client = new ServiceClient("", async () => {
      throw new Error("connection refused");
    });
    expect(await client.health()).toBe(false);
  });
});
