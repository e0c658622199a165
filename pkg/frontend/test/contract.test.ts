/** Contract tests: every control emits exactly the documented HTTP call. */

import { beforeEach, describe, expect, it, vi } from "vitest";
import { Api } from "../src/api.js";
import { createApp } from "../src/ui.js";

interface Call {
  url: string;
  method: string;
  body: Record<string, unknown> | null;
}

type Router = (url: string, init?: RequestInit) => unknown;

const IDENT = [
  [1, 0, 0],
  [0, 1, 0],
  [0, 0, 1],
];
const HASH_A = "aaaaaaaaaaaaaaaaaaaaaaaa";
const HASH_B = "bbbbbbbbbbbbbbbbbbbbbbbb";

function thingRow(id: number, keyframes: unknown[]) {
  return {
    id,
    category: 4,
    category_name: "car",
    extent: [3.5, 1.6, 1.8],
    keyframes,
    field_sha256: "f".repeat(64),
  };
}

function makeSummary(things: unknown[], hash: string, logLength = 0) {
  return {
    class_table: ["sky", "road", "building", "pole", "car"],
    bounds: { lo: [-3, -6, -1], hi: [11, 2.01, 19] },
    background: [0.55, 0.72, 0.92],
    things,
    hash,
    log_length: logLength,
  };
}

const TWO_CARS = makeSummary(
  [
    thingRow(1, [
      { time: 0, rotation: IDENT, translation: [1, 2, 3] },
      { time: 1, rotation: IDENT, translation: [4, 2, 3] },
    ]),
    thingRow(2, [{ time: 0, rotation: IDENT, translation: [7, 0.7, 9.5] }]),
  ],
  HASH_A,
);
const ONE_CAR = makeSummary([TWO_CARS.things[0]], HASH_B, 1);

function jsonResponse(status: number, body: unknown) {
  return {
    ok: status >= 200 && status < 300,
    status,
    json: async () => body,
    blob: async () => new Blob([JSON.stringify(body)]),
  };
}

function pngResponse() {
  return {
    ok: true,
    status: 200,
    json: async () => ({}),
    blob: async () => new Blob([new Uint8Array([137, 80, 78, 71])]),
  };
}

let calls: Call[] = [];
let router: Router;

function defaultRouter(summary: unknown = TWO_CARS): Router {
  return (url, init) => {
    const method = init?.method ?? "GET";
    if (url === "/scene" && method === "GET") return jsonResponse(200, summary);
    if (url.startsWith("/render")) return pngResponse();
    return jsonResponse(500, { detail: `unhandled ${method} ${url}` });
  };
}

beforeEach(() => {
  calls = [];
  router = defaultRouter();
  vi.stubGlobal(
    "fetch",
    vi.fn(async (input: unknown, init?: RequestInit) => {
      const url = String(input);
      calls.push({
        url,
        method: init?.method ?? "GET",
        body: init?.body ? (JSON.parse(init.body as string) as Record<string, unknown>) : null,
      });
      return router(url, init);
    }),
  );
  let n = 0;
  (URL as unknown as Record<string, unknown>).createObjectURL = () => `blob:mock-${n++}`;
  (URL as unknown as Record<string, unknown>).revokeObjectURL = () => undefined;
});

async function settle(): Promise<void> {
  for (let i = 0; i < 4; i++) {
    await new Promise((resolve) => setTimeout(resolve, 0));
  }
}

async function mount() {
  document.body.innerHTML = '<div id="app"></div>';
  const app = createApp(document.getElementById("app") as HTMLElement, new Api(""));
  await app.ready;
  await settle();
  return app;
}

const pick = <T extends HTMLElement>(sel: string): T => {
  const found = document.querySelector<T>(sel);
  if (!found) throw new Error(`missing ${sel}`);
  return found;
};
const rows = () => Array.from(document.querySelectorAll<HTMLElement>(".thing-row"));
const editCalls = () => calls.filter((c) => c.url === "/edit");
const renderCalls = () => calls.filter((c) => c.url.startsWith("/render"));
const queryOf = (url: string) => new URLSearchParams(url.split("?", 2)[1] ?? "");

describe("object panel", () => {
  it("lists one row per thing from the scene summary", async () => {
    await mount();
    expect(calls.filter((c) => c.url === "/scene")).toHaveLength(1);
    expect(rows().map((r) => r.dataset.id)).toEqual(["1", "2"]);
    expect(pick("#object-panel").textContent).toContain("car");
  });

  it("remove click posts exactly one documented edit and refreshes once", async () => {
    await mount();
    calls.length = 0;
    router = (url, init) => {
      if (url === "/edit") return jsonResponse(200, { scene: ONE_CAR, log_index: 0 });
      return defaultRouter()(url, init);
    };
    pick<HTMLButtonElement>('.thing-row[data-id="2"] .remove-btn').click();
    await settle();
    expect(editCalls()).toHaveLength(1);
    expect(editCalls()[0].method).toBe("POST");
    expect(editCalls()[0].body).toEqual({ op: "remove", id: 2 });
    expect(renderCalls()).toHaveLength(1);
    expect(rows().map((r) => r.dataset.id)).toEqual(["1"]);
  });

  it("clone click posts exactly one edit with a fresh id", async () => {
    await mount();
    calls.length = 0;
    const cloned = makeSummary(
      [...TWO_CARS.things, thingRow(3, [{ time: 0, rotation: IDENT, translation: [1, 2, 3] }])],
      HASH_B,
      1,
    );
    router = (url, init) => {
      if (url === "/edit") return jsonResponse(200, { scene: cloned, log_index: 0 });
      return defaultRouter()(url, init);
    };
    pick<HTMLButtonElement>('.thing-row[data-id="1"] .clone-btn').click();
    await settle();
    expect(editCalls()).toHaveLength(1);
    expect(editCalls()[0].body).toEqual({ op: "clone", src: 1, dst: 3 });
    expect(rows()).toHaveLength(3);
  });

  it("flags a stale row and refetches the scene on a 404", async () => {
    await mount();
    calls.length = 0;
    let releaseScene: (() => void) | undefined;
    router = (url, init) => {
      if (url === "/edit") return jsonResponse(404, { detail: "unknown instance id 2" });
      if (url === "/scene") {
        return new Promise((resolve) => {
          releaseScene = () => resolve(jsonResponse(200, ONE_CAR));
        });
      }
      return defaultRouter()(url, init);
    };
    pick<HTMLButtonElement>('.thing-row[data-id="2"] .remove-btn').click();
    await settle();
    const stale = pick('.thing-row[data-id="2"]');
    expect(stale.classList.contains("stale")).toBe(true);
    expect(stale.textContent).toContain("stale");
    expect(calls.some((c) => c.url === "/scene")).toBe(true);
    expect(pick<HTMLFieldSetElement>("#controls").disabled).toBe(true);
    releaseScene?.();
    await settle();
    expect(rows().map((r) => r.dataset.id)).toEqual(["1"]);
    expect(pick<HTMLFieldSetElement>("#controls").disabled).toBe(false);
  });
});

describe("pose controls", () => {
  it("a 90 degree yaw emits the hand-computed rotation matrix", async () => {
    await mount();
    calls.length = 0;
    router = (url, init) => {
      if (url === "/edit") return jsonResponse(200, { scene: TWO_CARS, log_index: 0 });
      return defaultRouter()(url, init);
    };
    pick<HTMLInputElement>("#pose-yaw").value = "90";
    pick<HTMLButtonElement>("#pose-apply").click();
    await settle();
    expect(editCalls()).toHaveLength(1);
    const body = editCalls()[0].body as {
      op: string;
      id: number;
      time: number;
      rotation: number[][];
      translation: number[];
    };
    expect(body.op).toBe("set-pose");
    expect(body.id).toBe(1);
    expect(body.time).toBe(0);
    const expected = [
      [0, 0, 1],
      [0, 1, 0],
      [-1, 0, 0],
    ];
    for (let i = 0; i < 3; i++) {
      for (let j = 0; j < 3; j++) {
        expect(Math.abs(body.rotation[i][j] - expected[i][j])).toBeLessThan(1e-6);
      }
    }
    expect(body.translation).toEqual([1, 2, 3]);
  });

  it("zero deltas emit no request at all", async () => {
    await mount();
    calls.length = 0;
    pick<HTMLButtonElement>("#pose-apply").click();
    await settle();
    expect(calls).toHaveLength(0);
    expect(pick("#status-line").textContent).toContain("no pose changes");
  });

  it("bases the edit on the keyframe at or before the slider time", async () => {
    await mount();
    calls.length = 0;
    router = (url, init) => {
      if (url === "/edit") return jsonResponse(200, { scene: TWO_CARS, log_index: 0 });
      return defaultRouter()(url, init);
    };
    pick<HTMLInputElement>("#time-slider").value = "1";
    pick<HTMLInputElement>("#pose-dx").value = "1";
    pick<HTMLButtonElement>("#pose-apply").click();
    await settle();
    const body = editCalls()[0].body as { time: number; rotation: number[][]; translation: number[] };
    expect(body.time).toBe(1);
    expect(body.translation).toEqual([5, 2, 3]);
    expect(body.rotation).toEqual(IDENT);
  });
});

describe("viewport", () => {
  it("channel toggle changes only the channel query parameter", async () => {
    await mount();
    const before = renderCalls().at(-1);
    if (!before) throw new Error("no initial render");
    pick<HTMLInputElement>("#channel-depth").click();
    await settle();
    const after = renderCalls().at(-1);
    if (!after || after === before) throw new Error("channel toggle did not re-render");
    const qBefore = queryOf(before.url);
    const qAfter = queryOf(after.url);
    expect(before.url.split("?")[0]).toBe("/render");
    expect(after.url.split("?")[0]).toBe("/render");
    expect(qBefore.get("channel")).toBe("color");
    expect(qAfter.get("channel")).toBe("depth");
    const keys = new Set([...qBefore.keys(), ...qAfter.keys()]);
    for (const key of keys) {
      if (key === "channel") continue;
      expect(qAfter.get(key)).toBe(qBefore.get(key));
    }
  });

  it("a failed render shows the error banner and keeps the last image", async () => {
    await mount();
    const img = pick<HTMLImageElement>("#viewport-img");
    const lastSrc = img.src;
    expect(lastSrc).toContain("blob:");
    router = (url, init) => {
      if (url.startsWith("/render")) return jsonResponse(500, { detail: "render exploded" });
      return defaultRouter()(url, init);
    };
    pick<HTMLButtonElement>("#view-update").click();
    await settle();
    const banner = pick("#error-banner");
    expect(banner.classList.contains("visible")).toBe(true);
    expect(banner.textContent).toContain("render exploded");
    expect(img.src).toBe(lastSrc);
  });

  it("orbit inputs feed the cam parameter", async () => {
    await mount();
    calls.length = 0;
    pick<HTMLInputElement>("#orbit-az").value = "1.5";
    pick<HTMLInputElement>("#orbit-el").value = "-0.2";
    pick<HTMLInputElement>("#orbit-dist").value = "2";
    pick<HTMLButtonElement>("#view-update").click();
    await settle();
    expect(renderCalls()).toHaveLength(1);
    expect(queryOf(renderCalls()[0].url).get("cam")).toBe("1.5,-0.2,2");
  });
});

describe("mutation invariants", () => {
  it("locks all controls until the server confirms the edit", async () => {
    await mount();
    calls.length = 0;
    let release: (() => void) | undefined;
    router = (url, init) => {
      if (url === "/edit") {
        return new Promise((resolve) => {
          release = () => resolve(jsonResponse(200, { scene: ONE_CAR, log_index: 0 }));
        });
      }
      return defaultRouter()(url, init);
    };
    pick<HTMLButtonElement>('.thing-row[data-id="2"] .remove-btn').click();
    await settle();
    expect(pick<HTMLFieldSetElement>("#controls").disabled).toBe(true);
    pick<HTMLButtonElement>('.thing-row[data-id="1"] .remove-btn').click();
    await settle();
    expect(editCalls()).toHaveLength(1);
    release?.();
    await settle();
    expect(pick<HTMLFieldSetElement>("#controls").disabled).toBe(false);
    expect(editCalls()).toHaveLength(1);
  });

  it("a scripted sequence emits exactly one POST /edit per action", async () => {
    await mount();
    calls.length = 0;
    router = (url, init) => {
      if (url === "/edit") return jsonResponse(200, { scene: TWO_CARS, log_index: 0 });
      return defaultRouter()(url, init);
    };
    pick<HTMLButtonElement>('.thing-row[data-id="2"] .remove-btn').click();
    await settle();
    pick<HTMLButtonElement>('.thing-row[data-id="1"] .clone-btn').click();
    await settle();
    pick<HTMLInputElement>("#pose-yaw").value = "10";
    pick<HTMLButtonElement>("#pose-apply").click();
    await settle();
    expect(editCalls()).toHaveLength(3);
    expect(editCalls().every((c) => c.method === "POST")).toBe(true);
    expect(renderCalls()).toHaveLength(3);
  });

  it("undo posts /undo once and rebuilds from the returned summary", async () => {
    await mount();
    calls.length = 0;
    router = (url, init) => {
      if (url === "/undo") return jsonResponse(200, ONE_CAR);
      return defaultRouter()(url, init);
    };
    pick<HTMLButtonElement>("#undo-btn").click();
    await settle();
    const undos = calls.filter((c) => c.url === "/undo");
    expect(undos).toHaveLength(1);
    expect(undos[0].method).toBe("POST");
    expect(rows().map((r) => r.dataset.id)).toEqual(["1"]);
    expect(renderCalls()).toHaveLength(1);
  });

  it("an empty-log undo surfaces the server detail in the banner", async () => {
    await mount();
    router = (url, init) => {
      if (url === "/undo") return jsonResponse(409, { detail: "edit log is empty" });
      return defaultRouter()(url, init);
    };
    pick<HTMLButtonElement>("#undo-btn").click();
    await settle();
    expect(pick("#error-banner").textContent).toContain("edit log is empty");
  });

  it("save posts /save and reports the path", async () => {
    await mount();
    calls.length = 0;
    router = (url, init) => {
      if (url === "/save") return jsonResponse(200, { path: "/tmp/out", hash: HASH_A });
      return defaultRouter()(url, init);
    };
    pick<HTMLButtonElement>("#save-btn").click();
    await settle();
    const saves = calls.filter((c) => c.url === "/save");
    expect(saves).toHaveLength(1);
    expect(saves[0].method).toBe("POST");
    expect(pick("#status-line").textContent).toContain("/tmp/out");
  });
});
