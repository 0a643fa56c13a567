// Headless annotation workflow: fetch a batch, decide every card, submit,
// wait for training. main.ts drives the same client interactively; tests and
// scripted sessions drive it with an automatic decision function.

import { ApiClient } from "./api.js";
import type { Label, PairCard } from "./types.js";

export type Decide = (card: PairCard) => Label;

export async function runAnnotationRound(
  api: ApiClient,
  decide: Decide,
): Promise<"trained" | "duplicate" | "exhausted"> {
  const batch = await api.batch();
  if (batch.exhausted || !batch.pairs.length) return "exhausted";
  const labels = batch.pairs.map((card) => ({
    pair_id: card.id,
    label: decide(card),
  }));
  const result = await api.submitLabels(batch.round, labels);
  await api.waitReady();
  return result.status;
}

export async function runAnnotationSession(
  api: ApiClient,
  decide: Decide,
  maxRounds = 100,
): Promise<number> {
  let rounds = 0;
  for (let i = 0; i < maxRounds; i++) {
    const outcome = await runAnnotationRound(api, decide);
    if (outcome === "exhausted") break;
    rounds += 1;
  }
  return rounds;
}
