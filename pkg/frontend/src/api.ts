/** Thin typed client over the review service API. */

import type {
  InstancePage,
  InstanceSummary,
  ReviewResponse,
  ServiceConfig,
  SimilarResponse,
  Summary,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }

  get isConflict(): boolean {
    return this.status === 409;
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

async function parse<T>(response: Response): Promise<T> {
  if (!response.ok) {
    let detail = response.statusText;
    try {
      const body = (await response.json()) as { detail?: unknown };
      if (body.detail !== undefined) detail = String(body.detail);
    } catch {
      // non-JSON error body; keep status text
    }
    throw new ApiError(response.status, detail);
  }
  return (await response.json()) as T;
}

export interface ListFilters {
  status?: string;
  classIndex?: number;
  page?: number;
  pageSize?: number;
}

export function listQuery(filters: ListFilters): string {
  const params = new URLSearchParams();
  if (filters.status) params.set("status", filters.status);
  if (filters.classIndex !== undefined) params.set("class", String(filters.classIndex));
  params.set("page", String(filters.page ?? 1));
  params.set("page_size", String(filters.pageSize ?? 24));
  return params.toString();
}

export class ApiClient {
  constructor(
    private readonly base: string = "",
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private get(path: string) {
    return this.fetchImpl(this.base + path);
  }

  async health(): Promise<boolean> {
    try {
      const response = await this.get("/api/health");
      return response.ok;
    } catch {
      return false;
    }
  }

  config(): Promise<ServiceConfig> {
    return this.get("/api/config").then((r) => parse<ServiceConfig>(r));
  }

  summary(): Promise<Summary> {
    return this.get("/api/summary").then((r) => parse<Summary>(r));
  }

  instances(filters: ListFilters): Promise<InstancePage> {
    return this.get(`/api/instances?${listQuery(filters)}`).then((r) => parse<InstancePage>(r));
  }

  instance(id: string): Promise<InstanceSummary> {
    return this.get(`/api/instances/${encodeURIComponent(id)}`).then((r) =>
      parse<InstanceSummary>(r),
    );
  }

  review(id: string, decision: "confirm" | "reject", note?: string): Promise<ReviewResponse> {
    return this.fetchImpl(`${this.base}/api/instances/${encodeURIComponent(id)}/review`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ decision, note: note || null }),
    }).then((r) => parse<ReviewResponse>(r));
  }

  similar(id: string, n: number): Promise<SimilarResponse> {
    return this.get(`/api/instances/${encodeURIComponent(id)}/similar?n=${n}`).then((r) =>
      parse<SimilarResponse>(r),
    );
  }
}
