// Typed client for the engine service. Every number the UI shows comes out
// of these payloads; the client never post-processes values.

export interface BreakdownEntry {
  name: string;
  kind: "probability" | "impact" | "time";
  raw: number;
  normalized: number;
  weight: number;
  share: number;
}

export interface PlanEntry {
  rank: number;
  test_id: string;
  exposure: number;
  probability: number;
  impact: number;
  time: number;
  selected: boolean;
  stale_reason: string;
  breakdown: BreakdownEntry[];
}

export interface PlanDocument {
  budget: { kind: string; value: number };
  computed_on: string;
  entries: PlanEntry[];
}

export interface PlanResponse {
  ephemeral: boolean;
  plan: PlanDocument;
  sequence?: number;
}

export interface CommitRisk {
  commit_id: string;
  score: number;
  alert: boolean;
  threshold: number;
}

export interface Contribution {
  feature: string;
  contribution: number;
}

export interface CommitExplanation {
  commit_id: string;
  base: number;
  base_probability: number;
  prediction_raw: number;
  probability: number;
  contributions: Contribution[];
  top_features: Contribution[];
}

export interface RunSummary {
  run_id: string;
  started: string;
  finished: string;
  status: string;
  summary: Record<string, Record<string, number | string | null>>;
  artifact_digests: Record<string, string>;
}

export interface RunState {
  pipeline: string;
  state: "idle" | "queued" | "running" | "done" | "failed";
  run_id?: string;
  error?: string;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

async function parseError(response: Response): Promise<ApiError> {
  let code = "error";
  let message = response.statusText;
  try {
    const doc = await response.json();
    code = doc.error ?? code;
    message = doc.message ?? message;
  } catch {
    // non-JSON error body; keep the status text
  }
  return new ApiError(response.status, code, message);
}

export class ApiClient {
  constructor(readonly baseUrl: string = "") {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await fetch(this.baseUrl + path, init);
    if (!response.ok) throw await parseError(response);
    return (await response.json()) as T;
  }

  ranked(): Promise<PlanResponse> {
    return this.request("/tests/ranked");
  }

  whatif(
    overrides: Record<string, number>,
    sequence: number,
    budget?: { kind: string; value: number },
  ): Promise<PlanResponse> {
    const body: Record<string, unknown> = {
      weight_overrides: overrides,
      sequence,
    };
    if (budget) body.budget = budget;
    return this.request("/whatif", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  commitRisk(commitId: string): Promise<CommitRisk> {
    return this.request(`/commits/${encodeURIComponent(commitId)}/risk`);
  }

  commitExplanation(commitId: string): Promise<CommitExplanation> {
    return this.request(`/commits/${encodeURIComponent(commitId)}/explanation`);
  }

  runs(pipeline?: string): Promise<RunSummary[]> {
    const query = pipeline ? `?pipeline=${encodeURIComponent(pipeline)}` : "";
    return this.request(`/runs${query}`);
  }

  triggerRun(pipeline: string): Promise<RunState> {
    return this.request(`/pipelines/${encodeURIComponent(pipeline)}/run`, {
      method: "POST",
    });
  }

  runStatus(pipeline: string): Promise<RunState> {
    return this.request(`/pipelines/${encodeURIComponent(pipeline)}/status`);
  }
}
