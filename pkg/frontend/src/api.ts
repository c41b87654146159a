/**
 * Thin typed client for the curation service.
 *
 * Every method is one endpoint; no request carries state the server did not
 * hand out first. Mutations accept the tree version the caller last saw so
 * the server can reject stale writes with a 409.
 */

import type {
  AuditPage,
  ConflictDecision,
  ConflictPage,
  JobDescriptor,
  MutationAck,
  NodeDetail,
  ProposalDecision,
  ProposalPage,
  TreeSnapshot,
} from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    readonly status: number,
    detail: string,
  ) {
    super(detail);
    this.name = "ApiError";
  }

  get stale(): boolean {
    return this.status === 409;
  }
}

export class ApiClient {
  constructor(
    readonly base: string,
    private readonly fetchImpl: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async get<T>(path: string): Promise<T> {
    return this.send<T>(path, undefined);
  }

  private async post<T>(path: string, body: Record<string, unknown>): Promise<T> {
    return this.send<T>(path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  private async send<T>(path: string, init?: RequestInit): Promise<T> {
    let response: Response;
    try {
      response = await this.fetchImpl(this.base + path, init);
    } catch (err) {
      throw new ApiError(0, `service unreachable: ${String(err)}`);
    }
    let payload: unknown = null;
    try {
      payload = await response.json();
    } catch {
      payload = null;
    }
    if (!response.ok) {
      const detail =
        payload && typeof payload === "object" && "detail" in payload
          ? String((payload as { detail: unknown }).detail)
          : `HTTP ${response.status}`;
      throw new ApiError(response.status, detail);
    }
    return payload as T;
  }

  tree(): Promise<TreeSnapshot> {
    return this.get("/tree");
  }

  node(id: number): Promise<NodeDetail> {
    return this.get(`/tree/node/${id}`);
  }

  audit(since = 0): Promise<AuditPage> {
    return this.get(`/audit?since=${since}`);
  }

  proposals(status?: string): Promise<ProposalPage> {
    const query = status ? `?status=${encodeURIComponent(status)}` : "";
    return this.get(`/review/proposals${query}`);
  }

  decideProposal(
    id: string,
    action: "approve" | "reject",
    comment: string,
    version: number,
  ): Promise<ProposalDecision> {
    return this.post(`/review/proposals/${encodeURIComponent(id)}`, {
      action,
      comment,
      version,
    });
  }

  conflicts(): Promise<ConflictPage> {
    return this.get("/conflicts");
  }

  decideConflict(
    id: string,
    keep: string,
    comment: string,
    version: number,
  ): Promise<ConflictDecision> {
    return this.post(`/conflicts/${encodeURIComponent(id)}`, {
      action: "keep_path",
      keep,
      comment,
      version,
    });
  }

  freeze(nodeId: number, reasoning: string, version: number): Promise<MutationAck> {
    return this.post(`/nodes/${nodeId}/freeze`, { reasoning, version });
  }

  prune(nodeId: number, reasoning: string, version: number): Promise<MutationAck> {
    return this.post(`/nodes/${nodeId}/prune`, { reasoning, version });
  }

  submitJob(stage: string, config: Record<string, unknown>): Promise<JobDescriptor> {
    return this.post("/jobs", { stage, config });
  }

  job(id: string): Promise<JobDescriptor> {
    return this.get(`/jobs/${encodeURIComponent(id)}`);
  }
}
