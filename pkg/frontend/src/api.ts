/** Typed client for the daemon HTTP API (see docs/api.md in the repo root).
 *
 * The dashboard never computes or stores cryptographic material; everything
 * rendered comes straight from these endpoints.
 */

export interface Pair {
  id: string;
  prot_path: string;
  shared_path: string;
  state: "Active" | "AwaitingKey";
  entry_count: number;
  hidden_count: number;
  request_id: string | null;
}

export interface InboundRequest {
  id: string;
  pair_id: string;
  subject: string;
  fingerprint: string;
  shared_path: string;
}

export interface BackupVersion {
  version_id: number;
  captured_at: string;
  length: number;
}

export interface HiddenEntry {
  path: string;
  kind: string;
  versions: BackupVersion[];
}

export interface Policy {
  mode: "never" | "keep" | "ask";
  keep?: number;
}

export interface PolicyView {
  default: Policy;
  overrides: Record<string, Policy>;
}

export interface ApiEvent {
  seq: number;
  kind: string;
  payload: Record<string, unknown>;
  timestamp: number;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    public detail: string,
  ) {
    super(`API ${status}: ${detail}`);
  }
}

export class ApiClient {
  constructor(
    private base: string,
    private token: string,
  ) {}

  private async request<T>(path: string, init: RequestInit = {}): Promise<T> {
    const response = await fetch(this.base + path, {
      ...init,
      headers: {
        Authorization: `Bearer ${this.token}`,
        ...(init.body ? { "Content-Type": "application/json" } : {}),
        ...(init.headers ?? {}),
      },
    });
    if (!response.ok) {
      let detail = response.statusText;
      try {
        const body = await response.json();
        detail = body.detail ?? body.error ?? detail;
      } catch {
        /* non-JSON error body */
      }
      throw new ApiError(response.status, detail);
    }
    const text = await response.text();
    return (text ? JSON.parse(text) : null) as T;
  }

  listPairs(): Promise<Pair[]> {
    return this.request("/v1/pairs");
  }

  inboundRequests(): Promise<InboundRequest[]> {
    return this.request("/v1/requests/inbound");
  }

  approveRequest(id: string): Promise<{ decision: string }> {
    return this.request(`/v1/requests/inbound/${id}/approve`, { method: "POST" });
  }

  denyRequest(id: string): Promise<{ decision: string }> {
    return this.request(`/v1/requests/inbound/${id}/deny`, { method: "POST" });
  }

  hiddenEntries(pairId: string): Promise<HiddenEntry[]> {
    return this.request(`/v1/pairs/${pairId}/hidden`);
  }

  restore(pairId: string, path: string, version?: number): Promise<{ version_id: number }> {
    return this.request(`/v1/pairs/${pairId}/restore`, {
      method: "POST",
      body: JSON.stringify(version === undefined ? { path } : { path, version }),
    });
  }

  getPolicy(pairId: string): Promise<PolicyView> {
    return this.request(`/v1/pairs/${pairId}/policy`);
  }

  putPolicy(pairId: string, policy: Policy, path?: string): Promise<unknown> {
    return this.request(`/v1/pairs/${pairId}/policy`, {
      method: "PUT",
      body: JSON.stringify({ ...policy, path: path ?? null }),
    });
  }

  resolveBackupDecision(stagingId: string, store: boolean): Promise<unknown> {
    return this.request(`/v1/backup-decisions/${stagingId}`, {
      method: "POST",
      body: JSON.stringify({ store }),
    });
  }

  /** One long-poll turn of the event stream; returns the raw SSE text. */
  async pollEvents(since: number, waitSeconds: number): Promise<string> {
    const response = await fetch(
      `${this.base}/v1/events?since=${since}&wait=${waitSeconds}`,
      { headers: { Authorization: `Bearer ${this.token}` } },
    );
    if (!response.ok) {
      throw new ApiError(response.status, response.statusText);
    }
    return response.text();
  }
}
