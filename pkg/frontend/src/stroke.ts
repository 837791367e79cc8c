// Stroke model and deterministic rasterizer. The canvas UI and the
// submitted PNG both render through this module, so what the user sees is
// byte-identical to what the server receives.

import { encodePng } from "./png.js";

export interface Point {
  x: number;
  y: number;
}

export interface Stroke {
  points: Point[];
  width: number;
  erase: boolean;
}

export const INK = 40; // stroke gray level; background is white (255)

export class CanvasState {
  readonly size: number;
  private strokes: Stroke[] = [];

  constructor(size: number) {
    this.size = size;
  }

  get strokeCount(): number {
    return this.strokes.length;
  }

  get blank(): boolean {
    return this.strokes.length === 0;
  }

  beginStroke(width: number, erase = false): Stroke {
    const stroke: Stroke = { points: [], width, erase };
    this.strokes.push(stroke);
    return stroke;
  }

  /** Drop degenerate strokes (fewer than 2 points move nothing visible). */
  endStroke(): void {
    const last = this.strokes[this.strokes.length - 1];
    if (last && last.points.length === 0) {
      this.strokes.pop();
    }
  }

  undo(): boolean {
    return this.strokes.pop() !== undefined;
  }

  clear(): void {
    this.strokes = [];
  }

  snapshot(): Stroke[] {
    return this.strokes.map((s) => ({ ...s, points: s.points.map((p) => ({ ...p })) }));
  }

  restore(strokes: Stroke[]): void {
    this.strokes = strokes.map((s) => ({ ...s, points: s.points.map((p) => ({ ...p })) }));
  }

  /** Replay every stroke into a grayscale raster (255 = background). */
  raster(): Uint8Array {
    const n = this.size;
    const gray = new Uint8Array(n * n).fill(255);
    for (const stroke of this.strokes) {
      const level = stroke.erase ? 255 : INK;
      const radius = Math.max(0.5, stroke.width / 2);
      const pts = stroke.points;
      if (pts.length === 1) {
        stampDisc(gray, n, pts[0].x, pts[0].y, radius, level);
      }
      for (let i = 1; i < pts.length; i++) {
        stampSegment(gray, n, pts[i - 1], pts[i], radius, level);
      }
    }
    return gray;
  }

  /** Deterministic PNG bytes of the current drawing. */
  toPng(): Uint8Array {
    const gray = this.raster();
    const rgb = new Uint8Array(gray.length * 3);
    for (let i = 0; i < gray.length; i++) {
      rgb[i * 3] = gray[i];
      rgb[i * 3 + 1] = gray[i];
      rgb[i * 3 + 2] = gray[i];
    }
    return encodePng(this.size, this.size, rgb);
  }
}

function stampDisc(gray: Uint8Array, n: number, cx: number, cy: number, radius: number, level: number): void {
  const r2 = radius * radius;
  const x0 = Math.max(0, Math.floor(cx - radius));
  const x1 = Math.min(n - 1, Math.ceil(cx + radius));
  const y0 = Math.max(0, Math.floor(cy - radius));
  const y1 = Math.min(n - 1, Math.ceil(cy + radius));
  for (let y = y0; y <= y1; y++) {
    for (let x = x0; x <= x1; x++) {
      const dx = x + 0.5 - cx;
      const dy = y + 0.5 - cy;
      if (dx * dx + dy * dy <= r2) {
        gray[y * n + x] = level;
      }
    }
  }
}

function stampSegment(gray: Uint8Array, n: number, a: Point, b: Point, radius: number, level: number): void {
  const dist = Math.hypot(b.x - a.x, b.y - a.y);
  const steps = Math.max(1, Math.ceil(dist / Math.max(0.5, radius / 2)));
  for (let i = 0; i <= steps; i++) {
    const t = i / steps;
    stampDisc(gray, n, a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t, radius, level);
  }
}
