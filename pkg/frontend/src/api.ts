// Typed client for the retrieval service HTTP API.

export interface ServiceMeta {
  gallery_size: number;
  backbone_id: string;
  checkpoint_fingerprint: string;
  connectors: string[];
  k_cap: number;
}

export interface ResultItem {
  id: string;
  score: number;
  thumbnail_url: string;
}

export interface QueryResponse {
  results: ResultItem[];
  query: { sketch_sha256: string; text: string | null; connector: string | null };
}

export interface QueryDraft {
  sketchPng: Uint8Array;
  text: string;
  connector: string;
  k: number;
}

export function serializeDraft(draft: QueryDraft): string {
  return JSON.stringify({
    sketchPng: Array.from(draft.sketchPng),
    text: draft.text,
    connector: draft.connector,
    k: draft.k,
  });
}

export function deserializeDraft(payload: string): QueryDraft {
  const raw = JSON.parse(payload);
  return {
    sketchPng: new Uint8Array(raw.sketchPng),
    text: raw.text,
    connector: raw.connector,
    k: raw.k,
  };
}

export class RetrievalClient {
  constructor(
    private baseUrl: string,
    private fetchFn: typeof fetch = fetch,
  ) {}

  url(path: string): string {
    return `${this.baseUrl.replace(/\/$/, "")}${path}`;
  }

  async meta(): Promise<ServiceMeta> {
    const res = await this.fetchFn(this.url("/api/meta"));
    if (!res.ok) {
      throw new Error(`meta failed: HTTP ${res.status}`);
    }
    return (await res.json()) as ServiceMeta;
  }

  async query(draft: QueryDraft, signal?: AbortSignal): Promise<QueryResponse> {
    const form = new FormData();
    const buffer = draft.sketchPng.slice().buffer as ArrayBuffer;
    form.append("sketch", new Blob([buffer], { type: "image/png" }), "sketch.png");
    if (draft.text.trim()) {
      form.append("text", draft.text.trim());
    }
    if (draft.connector) {
      form.append("connector", draft.connector);
    }
    form.append("k", String(draft.k));
    const res = await this.fetchFn(this.url("/api/query"), {
      method: "POST",
      body: form,
      signal,
    });
    if (!res.ok) {
      const detail = await res.text().catch(() => "");
      throw new Error(`query failed: HTTP ${res.status} ${detail}`);
    }
    return (await res.json()) as QueryResponse;
  }
}
