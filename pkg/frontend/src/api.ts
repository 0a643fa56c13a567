import type {
  BatchPayload,
  Label,
  MetricsPayload,
  PairContext,
  StatusPayload,
  SubmitResult,
} from "./types.js";

export class StaleBatchError extends Error {}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private baseUrl: string = "",
    private fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async get<T>(path: string): Promise<T> {
    const res = await this.fetchFn(this.baseUrl + path);
    if (!res.ok) throw new Error(`GET ${path} failed: ${res.status}`);
    return (await res.json()) as T;
  }

  status(): Promise<StatusPayload> {
    return this.get("/status");
  }

  batch(): Promise<BatchPayload> {
    return this.get("/batch");
  }

  metrics(): Promise<MetricsPayload> {
    return this.get("/metrics");
  }

  pairContext(id: string): Promise<PairContext> {
    return this.get(`/pair/${id}/context`);
  }

  async submitLabels(
    round: number,
    labels: { pair_id: string; label: Label }[],
  ): Promise<SubmitResult> {
    const res = await this.fetchFn(this.baseUrl + "/labels", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ round, labels }),
    });
    if (res.status === 409) {
      throw new StaleBatchError(await res.text());
    }
    if (!res.ok) throw new Error(`POST /labels failed: ${res.status}`);
    return (await res.json()) as SubmitResult;
  }

  /** Poll /status until training finishes. */
  async waitReady(intervalMs = 300, maxTries = 600): Promise<StatusPayload> {
    for (let i = 0; i < maxTries; i++) {
      const status = await this.status();
      if (status.status === "ready") return status;
      await new Promise((resolve) => setTimeout(resolve, intervalMs));
    }
    throw new Error("server never became ready");
  }
}
