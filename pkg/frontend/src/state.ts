// Annotation session state: a pure function of server responses plus the
// annotator's unsent labels. Unsent labels survive refreshes via storage.

import type { BatchPayload, Label, PairCard } from "./types.js";

export interface SessionState {
  round: number;
  cards: PairCard[];
  cursor: number;
  labels: Record<string, Label>;
  phase: "idle" | "labeling" | "submitting" | "training" | "exhausted";
}

export function initialState(): SessionState {
  return { round: -1, cards: [], cursor: 0, labels: {}, phase: "idle" };
}

export function startBatch(state: SessionState, batch: BatchPayload): SessionState {
  if (batch.exhausted) {
    return { ...initialState(), round: batch.round, phase: "exhausted" };
  }
  const sameRound = state.round === batch.round;
  return {
    round: batch.round,
    cards: batch.pairs,
    cursor: 0,
    labels: sameRound ? pruneLabels(state.labels, batch.pairs) : {},
    phase: "labeling",
  };
}

function pruneLabels(labels: Record<string, Label>, cards: PairCard[]) {
  const valid = new Set(cards.map((c) => c.id));
  const kept: Record<string, Label> = {};
  for (const [id, label] of Object.entries(labels)) {
    if (valid.has(id)) kept[id] = label;
  }
  return kept;
}

export function setLabel(state: SessionState, pairId: string, label: Label): SessionState {
  if (state.phase !== "labeling") return state;
  if (!state.cards.some((c) => c.id === pairId)) return state;
  return { ...state, labels: { ...state.labels, [pairId]: label } };
}

export function moveCursor(state: SessionState, delta: number): SessionState {
  if (!state.cards.length) return state;
  const cursor = Math.min(Math.max(state.cursor + delta, 0), state.cards.length - 1);
  return { ...state, cursor };
}

export function currentCard(state: SessionState): PairCard | null {
  return state.cards[state.cursor] ?? null;
}

export function labeledCount(state: SessionState): number {
  return Object.keys(state.labels).length;
}

export function canSubmit(state: SessionState): boolean {
  return (
    state.phase === "labeling" &&
    state.cards.length > 0 &&
    state.cards.every((c) => state.labels[c.id] !== undefined)
  );
}

export function toSubmission(state: SessionState): { pair_id: string; label: Label }[] {
  return state.cards.map((c) => ({ pair_id: c.id, label: state.labels[c.id] }));
}

// -- unsent-label persistence ------------------------------------------------

export interface StorageLike {
  getItem(key: string): string | null;
  setItem(key: string, value: string): void;
  removeItem(key: string): void;
}

const KEY = "kgalign.unsent";

export function saveUnsent(storage: StorageLike, state: SessionState): void {
  if (state.phase === "labeling" && Object.keys(state.labels).length) {
    storage.setItem(KEY, JSON.stringify({ round: state.round, labels: state.labels }));
  } else {
    storage.removeItem(KEY);
  }
}

export function restoreUnsent(storage: StorageLike, state: SessionState): SessionState {
  const raw = storage.getItem(KEY);
  if (!raw || state.phase !== "labeling") return state;
  try {
    const parsed = JSON.parse(raw) as { round: number; labels: Record<string, Label> };
    if (parsed.round !== state.round) {
      storage.removeItem(KEY);   // labels for a finished batch are stale
      return state;
    }
    const merged = { ...pruneLabels(parsed.labels, state.cards), ...state.labels };
    return { ...state, labels: merged };
  } catch {
    storage.removeItem(KEY);
    return state;
  }
}
