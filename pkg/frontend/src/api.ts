import { parseSceneMeta, RenderRequest, SceneMeta } from "./types";

export type FetchLike = (
  input: string,
  init?: RequestInit,
) => Promise<Response>;

export class ServiceError extends Error {
  constructor(
    public status: number,
    message: string,
  ) {
    super(message);
  }
}

async function raiseForStatus(resp: Response): Promise<Response> {
  if (resp.ok) {
    return resp;
  }
  let message = `HTTP ${resp.status}`;
  try {
    const body = (await resp.json()) as { message?: string };
    if (body.message) {
      message = body.message;
    }
  } catch {
    // non-JSON error body; keep the status message
  }
  throw new ServiceError(resp.status, message);
}

export class ServiceClient {
  constructor(
    private baseUrl: string = "",
    private fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  async scene(): Promise<SceneMeta> {
    const resp = await raiseForStatus(
      await this.fetchImpl(`${this.baseUrl}/api/scene`),
    );
    return parseSceneMeta(await resp.json());
  }

  gtUrl(frame: number): string {
    return `${this.baseUrl}/api/frame/${frame}/gt`;
  }

  async render(req: RenderRequest): Promise<Blob> {
    const resp = await raiseForStatus(
      await this.fetchImpl(`${this.baseUrl}/api/render`, {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify(req),
      }),
    );
    return resp.blob();
  }

  async putTrajectory(
    objectId: number,
    offset: [number, number, number],
    yaw = 0,
  ): Promise<void> {
    await raiseForStatus(
      await this.fetchImpl(`${this.baseUrl}/api/objects/${objectId}/trajectory`, {
        method: "PUT",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ offset, yaw }),
      }),
    );
  }

  async health(): Promise<boolean> {
    try {
      const resp = await this.fetchImpl(`${this.baseUrl}/healthz`);
      return resp.ok;
    } catch {
      return false;
    }
  }
}
