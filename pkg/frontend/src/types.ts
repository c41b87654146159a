/**
 * Payload shapes of the curation service JSON API.
 *
 * These mirror the wire format exactly; the UI never invents fields and
 * never renders anything that did not arrive in one of these bodies.
 */

export type NodeStatus = "active" | "pruned";

export interface TreeNode {
  id: number;
  name: string;
  axis: string;
  tier: number;
  parent: number | null;
  frequency: number;
  frozen: boolean;
  status: NodeStatus;
}

export interface TreeSnapshot {
  schema: number;
  version: number;
  nodes: TreeNode[];
}

export interface NodeDetail {
  node: TreeNode;
  children: TreeNode[];
  path: string[];
}

export interface AuditRecord {
  timestamp: string;
  actor: string;
  operation: string;
  node_path: string[];
  reasoning: string;
  evidence: string[] | null;
  params: Record<string, unknown> | null;
}

export interface AuditPage {
  records: AuditRecord[];
  next: number;
}

export type ProposalStatus = "pending" | "applied" | "rejected" | "unclassifiable";

export interface Proposal {
  id: string;
  entity_name: string;
  proposed_path: string[];
  reasoning: string;
  status: ProposalStatus;
  rejection_cause: string | null;
}

export interface ProposalPage {
  proposals: Proposal[];
  tree_version: number;
}

export interface ProposalDecision {
  status: "applied" | "rejected";
  node_id?: number;
  version?: number;
  cause?: string;
}

export interface ConflictCase {
  id: string;
  entity: string;
  paths: string[][];
  leaf_ids: number[];
  labels: string[];
}

export interface ConflictPage {
  conflicts: ConflictCase[];
  tree_version: number;
}

export interface ConflictDecision {
  kept: string[];
  pruned: number;
  version: number;
}

export interface MutationAck {
  version: number;
  frozen?: boolean;
  pruned?: number;
}

export type JobState = "queued" | "running" | "done" | "failed";

export interface JobDescriptor {
  id: string;
  stage: string;
  config_digest: string;
  state: JobState;
  progress: Record<string, number>;
  result: unknown;
  error: string | null;
}
