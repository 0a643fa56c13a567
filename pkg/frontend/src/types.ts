// Payload shapes of the annotation service HTTP API. The UI renders these
// verbatim; it never computes similarities or probabilities on its own.

export type Label = "match" | "non-match";

export interface PairCard {
  id: string;
  kind: "entity" | "relation" | "class";
  left: string;
  right: string;
  similarity: number;
  probability: number;
  gain: number;
}

export interface BatchPayload {
  round: number;
  pairs: PairCard[];
  exhausted: boolean;
}

export interface StatusPayload {
  status: "ready" | "training";
  round: number;
  labels_used: number;
  budget_left: number;
  pending: string[] | null;
  latest: RoundRecord | null;
}

export interface KindMetrics {
  h1: number;
  h10: number;
  mrr: number;
  precision: number;
  recall: number;
  f1: number;
  n_test: number;
}

export interface RoundRecord {
  selector: string;
  round: number;
  labels_used: number;
  labeled_match_fraction: number;
  metrics: Record<string, KindMetrics>;
}

export interface MetricsPayload {
  records: RoundRecord[];
}

export interface Neighborhood {
  name: string;
  triples: string[][];
  classes: string[];
}

export interface PairContext {
  id: string;
  kind: string;
  left: Neighborhood;
  right: Neighborhood;
}

export interface SubmitResult {
  status: "trained" | "duplicate";
  round: number;
}
