// Session state: draft handling and query history with restore.

import { QueryDraft, QueryResponse, deserializeDraft, serializeDraft } from "./api.js";
import { Stroke } from "./stroke.js";

export interface HistoryEntry {
  draft: QueryDraft;
  strokes: Stroke[];
  topResult: string | null;
  topScore: number | null;
  submittedAt: number;
}

export class SessionHistory {
  private entries: HistoryEntry[] = [];

  get length(): number {
    return this.entries.length;
  }

  list(): readonly HistoryEntry[] {
    return this.entries;
  }

  record(draft: QueryDraft, strokes: Stroke[], response: QueryResponse): HistoryEntry {
    const top = response.results[0];
    const entry: HistoryEntry = {
      // round-trip through the serialized form so stored drafts are
      // decoupled from later edits
      draft: deserializeDraft(serializeDraft(draft)),
      strokes: strokes.map((s) => ({ ...s, points: s.points.map((p) => ({ ...p })) })),
      topResult: top ? top.id : null,
      topScore: top ? top.score : null,
      submittedAt: Date.now(),
    };
    this.entries.push(entry);
    return entry;
  }

  get(index: number): HistoryEntry {
    const entry = this.entries[index];
    if (!entry) {
      throw new Error(`no history entry ${index}`);
    }
    return entry;
  }
}
