// Wire types mirroring the evaluation service's JSON bodies.

export type Assignment = Record<string, string>;

export interface CityPayload {
  type: "FeatureCollection";
  features: Array<{
    type: "Feature";
    properties: { beat_id: string; area_km2: number };
    geometry: { type: "Polygon"; coordinates: number[][][] } | null;
  }>;
  adjacency: string[][];
}

export interface BaseDesignPayload {
  assignment: Assignment;
  zones: string[];
  constraints: {
    max_shifts: number;
    n_max: number;
    zeta1: number;
    zeta2: number;
  };
}

export interface Badge {
  constraint: string;
  ok: boolean;
  detail: string[];
  info: { used?: number; max?: number };
}

export interface ZoneEvaluation {
  zone: string;
  surrogate_workload: number;
  surrogate_workload_hours: number;
  exact_workload: number | null;
  exact_workload_hours: number | null;
  mean_travel_s: number | null;
  mean_response_s: number | null;
}

export interface EvaluationResponse {
  zones: ZoneEvaluation[];
  surrogate_variance_hours: number;
  surrogate_variance_vs_base_pct: number;
  exact_variance_hours: number | null;
  exact_variance_vs_base_pct: number | null;
  shifts_from_base: number;
  badges: Badge[];
}

export interface OptimizeRequest {
  seed: number;
  max_shifts?: number | null;
  schedule?: {
    initial_temp?: number | null;
    cooling_rate?: number;
    iters_per_temp?: number;
    max_temps?: number;
    stall_limit?: number;
  };
  idempotency_key?: string | null;
}

export interface OptimizeJob {
  id: string;
  status: "queued" | "running" | "done" | "failed";
  progress: number;
  idempotency_key: string | null;
  result_assignment: Assignment | null;
  objective: number | null;
  shifts_from_base: number | null;
  error: string | null;
  trace: Array<Record<string, unknown>>;
}
