// @vitest-environment jsdom
//
// Scripted end-to-end drive of the studio against a live fixture-backed
// retrieval service: draw a stroke, submit with text, inspect the ordered
// grid, edit the text, resubmit (reusing the sketch raster), and restore a
// history entry. Set DUET_SERVICE_URL to enable; the suite is skipped when
// no service is reachable.

import { Blob as NodeBlob } from "node:buffer";

import { FormData as UndiciFormData, fetch as undiciFetch } from "undici";
import { beforeAll, describe, expect, it } from "vitest";

import { RetrievalClient } from "../src/api.js";
import { StudioApp } from "../src/app.js";

// jsdom swaps in DOM FormData/Blob that node's fetch cannot serialize;
// restore node-native ones so the app code can build its form
Object.assign(globalThis, { FormData: UndiciFormData, Blob: NodeBlob });

// Cross-realm FormData/Blob streaming is unreliable between jsdom, the
// undici package, and node's built-in fetch, so the test transport encodes
// multipart bodies into a plain Buffer itself.
async function encodeMultipart(form: InstanceType<typeof UndiciFormData>) {
  const boundary = `----duet${Math.random().toString(16).slice(2)}`;
  const chunks: Buffer[] = [];
  for (const [name, value] of form.entries()) {
    chunks.push(Buffer.from(`--${boundary}\r\n`));
    if (typeof value === "string") {
      chunks.push(Buffer.from(
        `Content-Disposition: form-data; name="${name}"\r\n\r\n${value}\r\n`));
    } else {
      const bytes = Buffer.from(await (value as { arrayBuffer(): Promise<ArrayBuffer> }).arrayBuffer());
      const filename = (value as { name?: string }).name ?? "blob";
      const type = (value as { type?: string }).type || "application/octet-stream";
      chunks.push(Buffer.from(
        `Content-Disposition: form-data; name="${name}"; filename="${filename}"\r\n` +
        `Content-Type: ${type}\r\n\r\n`));
      chunks.push(bytes, Buffer.from("\r\n"));
    }
  }
  chunks.push(Buffer.from(`--${boundary}--\r\n`));
  return { body: Buffer.concat(chunks), boundary };
}

const testFetch = (async (url: RequestInfo | URL, init?: RequestInit) => {
  if (init?.body instanceof UndiciFormData) {
    const { body, boundary } = await encodeMultipart(init.body);
    return undiciFetch(String(url), {
      method: init.method,
      headers: { "content-type": `multipart/form-data; boundary=${boundary}` },
      body,
    });
  }
  return undiciFetch(String(url), { method: init?.method });
}) as unknown as typeof fetch;

const SERVICE_URL = process.env.DUET_SERVICE_URL ?? "";

const PAGE = `
  <div id="status"></div>
  <canvas id="sketch-canvas"></canvas>
  <div id="blank-hint"></div>
  <button id="undo"></button>
  <button id="clear"></button>
  <input type="checkbox" id="eraser" />
  <select id="connector"></select>
  <input type="text" id="text" />
  <input type="number" id="topk" value="5" />
  <button id="submit"></button>
  <div id="results"></div>
  <div id="history"></div>
`;

function drawTriangle(app: StudioApp): void {
  const stroke = app.state.beginStroke(4);
  const pts = [
    [160, 60], [80, 240], [240, 240], [160, 60],
  ];
  for (const [x, y] of pts) {
    for (let t = 0; t < 10; t++) {
      stroke.points.push({ x, y });
    }
  }
  // interpolate edges for a visible outline
  stroke.points.length = 0;
  for (let i = 1; i < pts.length; i++) {
    for (let t = 0; t <= 20; t++) {
      const a = pts[i - 1];
      const b = pts[i];
      stroke.points.push({ x: a[0] + ((b[0] - a[0]) * t) / 20, y: a[1] + ((b[1] - a[1]) * t) / 20 });
    }
  }
  app.state.endStroke();
  app.redraw();
}

describe.skipIf(!SERVICE_URL)("studio against live service", { timeout: 60000 }, () => {
  let app: StudioApp;

  beforeAll(async () => {
    document.body.innerHTML = PAGE;
    app = new StudioApp(document,
                        new RetrievalClient(SERVICE_URL, undiciFetch as unknown as typeof fetch));
    await app.init();
  });

  it("blank canvas disables submit with a hint", async () => {
    expect((document.querySelector("#submit") as HTMLButtonElement).disabled).toBe(true);
    expect(await app.submit()).toBeNull();
  });

  it("draw, submit with text, ordered non-empty grid", async () => {
    drawTriangle(app);
    expect((document.querySelector("#submit") as HTMLButtonElement).disabled).toBe(false);
    (document.querySelector("#text") as HTMLInputElement).value = "red laces";
    (document.querySelector("#connector") as HTMLSelectElement).value = "with";
    const response = await app.submit();
    expect(response).not.toBeNull();
    expect(response!.results.length).toBeGreaterThan(0);
    const scores = response!.results.map((r) => r.score);
    for (let i = 1; i < scores.length; i++) {
      expect(scores[i - 1]).toBeGreaterThanOrEqual(scores[i]);
    }
    expect(document.querySelectorAll("#results .result-card").length).toBe(scores.length);
    expect(app.history.length).toBe(1);
  });

  it("text-only edit resubmits the same sketch raster", async () => {
    (document.querySelector("#text") as HTMLInputElement).value = "blue";
    const response = await app.submit();
    expect(response).not.toBeNull();
    expect(app.history.length).toBe(2);
    const first = app.history.get(0);
    const second = app.history.get(1);
    expect(second.draft.sketchPng).toEqual(first.draft.sketchPng);
    expect(second.draft.text).toBe("blue");
  });

  it("restoring a history entry reproduces identical results", async () => {
    const firstResponse = await (async () => {
      app.restore(0);
      return app.submit();
    })();
    expect(firstResponse).not.toBeNull();
    expect(app.history.length).toBe(3);
    const original = app.history.get(0);
    const replay = app.history.get(2);
    expect(replay.draft).toEqual(original.draft);
    expect(replay.topResult).toBe(original.topResult);
    expect(replay.topScore).toBe(original.topScore);
  });

  it("history survives k changes", async () => {
    (document.querySelector("#topk") as HTMLInputElement).value = "3";
    const response = await app.submit();
    expect(response).not.toBeNull();
    expect(response!.results.length).toBeLessThanOrEqual(3);
    expect(app.history.length).toBe(4);
    expect(app.history.get(0).draft.k).toBe(5);
  });
});
