/** Typed client for the edit service HTTP interface.
 *
 * Every mutating UI action maps to exactly one POST here; the viewport image
 * comes from GET /render. The client never caches scene state, each call
 * returns the server's authoritative summary.
 */

export interface Keyframe {
  time: number;
  rotation: number[][];
  translation: number[];
}

export interface ThingRow {
  id: number;
  category: number;
  category_name: string;
  extent: number[];
  keyframes: Keyframe[];
  field_sha256: string;
}

export interface SceneSummary {
  class_table: string[];
  bounds: { lo: number[]; hi: number[] };
  background: number[];
  things: ThingRow[];
  hash: string;
  log_length: number;
}

export interface EditResult {
  scene: SceneSummary;
  log_index: number;
}

export type EditOp = Record<string, unknown> & { op: string };

export type Channel = "color" | "depth" | "semantic" | "instance";

export interface RenderParams {
  cam: string;
  time: number;
  w: number;
  h: number;
  channel: Channel;
  refine?: boolean;
  /** Scene hash; ignored by the server, forces a refetch after edits. */
  v?: string;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    detail: string,
  ) {
    super(detail);
    this.name = "ApiError";
  }
}

async function parseDetail(res: Response): Promise<string> {
  try {
    const body = (await res.json()) as { detail?: unknown };
    if (typeof body.detail === "string") return body.detail;
    return JSON.stringify(body);
  } catch {
    return `request failed with status ${res.status}`;
  }
}

export class Api {
  constructor(private base = "") {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await fetch(this.base + path, init);
    if (!res.ok) throw new ApiError(res.status, await parseDetail(res));
    return (await res.json()) as T;
  }

  private post<T>(path: string, body: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  scene(): Promise<SceneSummary> {
    return this.request<SceneSummary>("/scene");
  }

  log(): Promise<{ ops: EditOp[] }> {
    return this.request<{ ops: EditOp[] }>("/log");
  }

  edit(op: EditOp): Promise<EditResult> {
    return this.post<EditResult>("/edit", op);
  }

  undo(): Promise<SceneSummary> {
    return this.post<SceneSummary>("/undo", {});
  }

  save(path?: string): Promise<{ path: string; hash: string }> {
    return this.post<{ path: string; hash: string }>("/save", path ? { path } : {});
  }

  renderUrl(p: RenderParams): string {
    const q = new URLSearchParams();
    q.set("cam", p.cam);
    q.set("time", String(p.time));
    q.set("w", String(p.w));
    q.set("h", String(p.h));
    q.set("channel", p.channel);
    if (p.refine) q.set("refine", "1");
    if (p.v !== undefined) q.set("v", p.v);
    return `${this.base}/render?${q.toString()}`;
  }

  /** Fetch a rendered frame as an object URL. Throws ApiError on failure. */
  async fetchRender(p: RenderParams): Promise<string> {
    const res = await fetch(this.renderUrl(p));
    if (!res.ok) throw new ApiError(res.status, await parseDetail(res));
    const blob = await res.blob();
    return URL.createObjectURL(blob);
  }
}
