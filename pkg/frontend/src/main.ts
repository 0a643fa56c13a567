// DOM wiring for the annotation UI. The server is the source of truth; this
// file only renders state.ts output and forwards annotator input.

import { ApiClient, StaleBatchError } from "./api.js";
import {
  SessionState,
  canSubmit,
  currentCard,
  initialState,
  labeledCount,
  moveCursor,
  restoreUnsent,
  saveUnsent,
  setLabel,
  startBatch,
  toSubmission,
} from "./state.js";
import type { Label, PairContext, RoundRecord } from "./types.js";

const api = new ApiClient("");
let state: SessionState = initialState();

const el = (id: string) => document.getElementById(id)!;

function render() {
  const card = currentCard(state);
  el("phase").textContent = state.phase;
  el("progress").textContent = `${labeledCount(state)}/${state.cards.length}`;
  const submit = el("submit") as HTMLButtonElement;
  submit.disabled = !canSubmit(state);
  if (!card) {
    el("card").classList.add("hidden");
    return;
  }
  el("card").classList.remove("hidden");
  el("kind").textContent = card.kind;
  el("left-name").textContent = card.left;
  el("right-name").textContent = card.right;
  el("similarity").textContent = card.similarity.toFixed(3);
  el("probability").textContent = card.probability.toFixed(3);
  el("gain").textContent = card.gain.toFixed(3);
  el("position").textContent = `${state.cursor + 1} of ${state.cards.length}`;
  const label = state.labels[card.id];
  el("label-state").textContent = label ?? "unlabeled";
  void renderContext(card.id);
}

async function renderContext(pairId: string) {
  try {
    const ctx: PairContext = await api.pairContext(pairId);
    for (const side of ["left", "right"] as const) {
      const box = el(`${side}-context`);
      const data = ctx[side];
      const triples = data.triples
        .map((t) => `<li>${t.join(" → ")}</li>`)
        .join("");
      const classes = data.classes.length
        ? `<p>classes: ${data.classes.join(", ")}</p>`
        : "";
      box.innerHTML = `<ul>${triples}</ul>${classes}`;
    }
  } catch {
    /* context is cosmetic; ignore transient errors */
  }
}

function renderMetrics(records: RoundRecord[]) {
  const rows = records
    .map((r) => {
      const m = r.metrics["entity"];
      return `<tr><td>${r.round}</td><td>${r.labels_used}</td>` +
        `<td>${(r.labeled_match_fraction * 100).toFixed(1)}%</td>` +
        `<td>${m.h1.toFixed(3)}</td><td>${m.mrr.toFixed(3)}</td><td>${m.f1.toFixed(3)}</td></tr>`;
    })
    .join("");
  el("metrics-body").innerHTML = rows;
}

function apply(next: SessionState) {
  state = next;
  saveUnsent(window.localStorage, state);
  render();
}

async function loadBatch() {
  apply({ ...state, phase: "idle" });
  const batch = await api.batch();
  let next = startBatch(state, batch);
  next = restoreUnsent(window.localStorage, next);
  apply(next);
  const metrics = await api.metrics();
  renderMetrics(metrics.records);
}

async function submit() {
  if (!canSubmit(state)) return;
  apply({ ...state, phase: "submitting" });
  try {
    await api.submitLabels(state.round, toSubmission(state));
    window.localStorage.removeItem("kgalign.unsent");
    apply({ ...state, phase: "training" });
    await api.waitReady();
    await loadBatch();
  } catch (err) {
    if (err instanceof StaleBatchError) {
      await loadBatch();   // server moved on; re-sync, unsent labels survive
      return;
    }
    apply({ ...state, phase: "labeling" });   // network hiccup: labels kept
  }
}

function onLabel(label: Label) {
  const card = currentCard(state);
  if (!card) return;
  let next = setLabel(state, card.id, label);
  next = moveCursor(next, 1);
  apply(next);
}

function wire() {
  el("match").addEventListener("click", () => onLabel("match"));
  el("non-match").addEventListener("click", () => onLabel("non-match"));
  el("prev").addEventListener("click", () => apply(moveCursor(state, -1)));
  el("next").addEventListener("click", () => apply(moveCursor(state, 1)));
  el("submit").addEventListener("click", () => void submit());
  document.addEventListener("keydown", (ev) => {
    if (ev.key === "m") onLabel("match");
    else if (ev.key === "n") onLabel("non-match");
    else if (ev.key === "ArrowRight" || ev.key === " ") apply(moveCursor(state, 1));
    else if (ev.key === "ArrowLeft") apply(moveCursor(state, -1));
    else if (ev.key === "Enter") void submit();
  });
  void loadBatch();
}

document.addEventListener("DOMContentLoaded", wire);
