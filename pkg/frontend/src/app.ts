// DOM wiring for the sketch studio: draw, compose, submit, inspect, refine.

import { QueryDraft, QueryResponse, RetrievalClient } from "./api.js";
import { SessionHistory } from "./state.js";
import { CanvasState, Stroke } from "./stroke.js";

const CANVAS_SIZE = 320;
const DEFAULT_CONNECTOR = "with";

export class StudioApp {
  readonly state = new CanvasState(CANVAS_SIZE);
  readonly history = new SessionHistory();
  private client: RetrievalClient;
  private root: Document;
  private activeStroke: Stroke | null = null;
  private inflight: AbortController | null = null;
  private lastDraft: QueryDraft | null = null;

  constructor(root: Document, client: RetrievalClient) {
    this.root = root;
    this.client = client;
  }

  async init(): Promise<void> {
    const canvas = this.el<HTMLCanvasElement>("#sketch-canvas");
    canvas.width = CANVAS_SIZE;
    canvas.height = CANVAS_SIZE;
    this.bindCanvas(canvas);
    this.el<HTMLButtonElement>("#undo").addEventListener("click", () => {
      this.state.undo();
      this.redraw();
    });
    this.el<HTMLButtonElement>("#clear").addEventListener("click", () => {
      this.state.clear();
      this.redraw();
    });
    this.el<HTMLButtonElement>("#submit").addEventListener("click", () => {
      void this.submit();
    });
    this.redraw();
    try {
      const meta = await this.client.meta();
      const select = this.el<HTMLSelectElement>("#connector");
      select.innerHTML = "";
      for (const word of meta.connectors) {
        const opt = this.root.createElement("option");
        opt.value = word;
        opt.textContent = word;
        if (word === DEFAULT_CONNECTOR) {
          opt.selected = true;
        }
        select.appendChild(opt);
      }
      const kInput = this.el<HTMLInputElement>("#topk");
      kInput.max = String(meta.k_cap);
      this.setStatus(`gallery of ${meta.gallery_size} photos — draw and search`);
    } catch (err) {
      this.setStatus(`service unreachable: ${String(err)}`, true);
    }
  }

  private bindCanvas(canvas: HTMLCanvasElement): void {
    const pos = (ev: PointerEvent) => {
      const rect = canvas.getBoundingClientRect();
      return {
        x: ((ev.clientX - rect.left) / rect.width) * CANVAS_SIZE,
        y: ((ev.clientY - rect.top) / rect.height) * CANVAS_SIZE,
      };
    };
    canvas.addEventListener("pointerdown", (ev) => {
      canvas.setPointerCapture(ev.pointerId);
      const erase = this.el<HTMLInputElement>("#eraser").checked;
      this.activeStroke = this.state.beginStroke(erase ? 16 : 4, erase);
      this.activeStroke.points.push(pos(ev));
      this.redraw();
    });
    canvas.addEventListener("pointermove", (ev) => {
      if (!this.activeStroke) {
        return;
      }
      this.activeStroke.points.push(pos(ev));
      this.redraw();
    });
    const finish = () => {
      if (this.activeStroke) {
        this.state.endStroke();
        this.activeStroke = null;
        this.redraw();
      }
    };
    canvas.addEventListener("pointerup", finish);
    canvas.addEventListener("pointercancel", finish);
  }

  redraw(): void {
    this.el<HTMLButtonElement>("#submit").disabled = this.state.blank;
    this.el<HTMLElement>("#blank-hint").style.display = this.state.blank ? "block" : "none";
    const canvas = this.el<HTMLCanvasElement>("#sketch-canvas");
    const ctx = canvas.getContext("2d");
    if (!ctx) {
      return; // headless DOM without 2D context: state still updates
    }
    const gray = this.state.raster();
    const img = ctx.createImageData(CANVAS_SIZE, CANVAS_SIZE);
    for (let i = 0; i < gray.length; i++) {
      img.data[i * 4] = gray[i];
      img.data[i * 4 + 1] = gray[i];
      img.data[i * 4 + 2] = gray[i];
      img.data[i * 4 + 3] = 255;
    }
    ctx.putImageData(img, 0, 0);
  }

  currentDraft(): QueryDraft {
    return {
      sketchPng: this.state.toPng(),
      text: this.el<HTMLInputElement>("#text").value,
      connector: this.el<HTMLSelectElement>("#connector").value,
      k: Number(this.el<HTMLInputElement>("#topk").value) || 10,
    };
  }

  async submit(): Promise<QueryResponse | null> {
    if (this.state.blank) {
      return null;
    }
    if (this.inflight) {
      this.inflight.abort();
    }
    this.inflight = new AbortController();
    const draft = this.currentDraft();
    this.lastDraft = draft;
    this.setStatus("searching…");
    try {
      const response = await this.client.query(draft, this.inflight.signal);
      this.renderResults(response);
      const entry = this.history.record(draft, this.state.snapshot(), response);
      this.renderHistory();
      this.setStatus(`top match: ${entry.topResult ?? "none"}`);
      return response;
    } catch (err) {
      if ((err as Error).name === "AbortError") {
        return null;
      }
      this.setStatus(`query failed: ${String(err)}`, true);
      return null;
    } finally {
      this.inflight = null;
    }
  }

  renderResults(response: QueryResponse): void {
    const grid = this.el<HTMLElement>("#results");
    grid.innerHTML = "";
    for (const item of response.results) {
      const card = this.root.createElement("figure");
      card.className = "result-card";
      const link = this.root.createElement("a");
      link.href = this.client.url(`/api/image/${item.id}`);
      link.target = "_blank";
      const img = this.root.createElement("img");
      img.src = this.client.url(item.thumbnail_url);
      img.alt = item.id;
      link.appendChild(img);
      const caption = this.root.createElement("figcaption");
      caption.textContent = `${item.score.toFixed(3)} ${item.id}`;
      card.appendChild(link);
      card.appendChild(caption);
      grid.appendChild(card);
    }
  }

  renderHistory(): void {
    const panel = this.el<HTMLElement>("#history");
    panel.innerHTML = "";
    this.history.list().forEach((entry, index) => {
      const row = this.root.createElement("button");
      row.className = "history-entry";
      const text = entry.draft.text ? `"${entry.draft.text}"` : "(sketch only)";
      row.textContent = `#${index + 1} ${text} → ${entry.topResult ?? "no hit"}`;
      row.addEventListener("click", () => this.restore(index));
      panel.appendChild(row);
    });
  }

  restore(index: number): void {
    const entry = this.history.get(index);
    this.state.restore(entry.strokes);
    this.el<HTMLInputElement>("#text").value = entry.draft.text;
    this.el<HTMLSelectElement>("#connector").value = entry.draft.connector;
    this.el<HTMLInputElement>("#topk").value = String(entry.draft.k);
    this.redraw();
    this.setStatus(`restored query #${index + 1} — edit and resubmit`);
  }

  private setStatus(message: string, isError = false): void {
    const bar = this.el<HTMLElement>("#status");
    bar.textContent = message;
    bar.classList.toggle("error", isError);
  }

  private el<T extends Element>(selector: string): T {
    const node = this.root.querySelector(selector);
    if (!node) {
      throw new Error(`missing element ${selector}`);
    }
    return node as T;
  }
}
