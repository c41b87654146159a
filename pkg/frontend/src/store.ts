/**
 * Application store: one mutable state bag, actions that talk to the API,
 * and a strict rule that server data enters the state only from GET bodies.
 *
 * Mutations POST, and on success refetch the slices they may have changed;
 * nothing is patched in optimistically. A 409 means the tree moved under
 * us: surface a stale notice and refetch everything. Any other failure
 * leaves the projection untouched apart from the error notice.
 */

import { ApiClient, ApiError } from "./api.js";
import type { AuditRecord, ConflictCase, Proposal, TreeNode } from "./types.js";
import { buildIndex, patchChildren, type TreeIndex } from "./treeview.js";

export interface Notice {
  kind: "stale" | "error" | "info";
  text: string;
}

export interface StoreState {
  tree: TreeIndex | null;
  proposals: Proposal[];
  conflicts: ConflictCase[];
  audit: AuditRecord[];
  notice: Notice | null;
  selection: number | null;
  expanded: Set<number>;
  reviewCursor: number;
}

export type Listener = (state: StoreState) => void;

export class AppStore {
  readonly state: StoreState = {
    tree: null,
    proposals: [],
    conflicts: [],
    audit: [],
    notice: null,
    selection: null,
    expanded: new Set(),
    reviewCursor: 0,
  };

  private listeners: Listener[] = [];

  constructor(private readonly api: ApiClient) {}

  subscribe(listener: Listener): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  private emit(): void {
    for (const listener of this.listeners) {
      listener(this.state);
    }
  }

  private get version(): number {
    return this.state.tree?.version ?? 0;
  }

  /** Full projection rebuild from GETs; also the page-load path. */
  async init(): Promise<void> {
    const [snapshot, proposals, conflicts, audit] = await Promise.all([
      this.api.tree(),
      this.api.proposals("pending"),
      this.api.conflicts(),
      this.api.audit(0),
    ]);
    this.state.tree = buildIndex(snapshot);
    this.state.proposals = proposals.proposals;
    this.state.conflicts = conflicts.conflicts;
    this.state.audit = audit.records;
    this.clampCursor();
    this.emit();
  }

  async refresh(): Promise<void> {
    await this.init();
  }

  /**
   * Server-visible state as plain data, for equality checks across reloads.
   * View-local fields (selection, expansion, cursor) are deliberately out.
   */
  projection(): {
    version: number;
    nodes: TreeNode[];
    proposals: Proposal[];
    conflicts: ConflictCase[];
    audit: AuditRecord[];
  } {
    const nodes = this.state.tree
      ? [...this.state.tree.nodes.values()].sort((a, b) => a.id - b.id)
      : [];
    return {
      version: this.version,
      nodes,
      proposals: this.state.proposals,
      conflicts: this.state.conflicts,
      audit: this.state.audit,
    };
  }

  select(nodeId: number | null): void {
    this.state.selection = nodeId;
    this.emit();
  }

  /** Expand fetches the node so the child list is current; collapse is local. */
  async toggle(nodeId: number): Promise<void> {
    if (this.state.expanded.has(nodeId)) {
      this.state.expanded.delete(nodeId);
      this.emit();
      return;
    }
    await this.guard(async () => {
      const detail = await this.api.node(nodeId);
      if (this.state.tree) {
        patchChildren(this.state.tree, nodeId, detail.children);
      }
      this.state.expanded.add(nodeId);
    });
  }

  async freeze(nodeId: number, reasoning: string): Promise<void> {
    await this.guard(async () => {
      await this.api.freeze(nodeId, reasoning, this.version);
      await this.init();
    });
  }

  async prune(nodeId: number, reasoning: string): Promise<void> {
    await this.guard(async () => {
      await this.api.prune(nodeId, reasoning, this.version);
      await this.init();
    });
  }

  async approve(proposalId: string, comment: string): Promise<void> {
    await this.guard(async () => {
      await this.api.decideProposal(proposalId, "approve", comment, this.version);
      await this.init();
    });
  }

  async reject(proposalId: string, comment: string): Promise<void> {
    await this.guard(async () => {
      await this.api.decideProposal(proposalId, "reject", comment, this.version);
      await this.init();
    });
  }

  /**
   * One POST per proposal, each carrying the version the previous response
   * reported. A stale response aborts the remainder; the final refetch
   * reconciles whatever landed.
   */
  async bulkApprove(proposalIds: readonly string[]): Promise<number> {
    let version = this.version;
    let sent = 0;
    let failure: Notice | null = null;
    for (const id of proposalIds) {
      try {
        const decision = await this.api.decideProposal(id, "approve", "", version);
        sent += 1;
        if (decision.version !== undefined) {
          version = decision.version;
        }
      } catch (err) {
        failure = this.noticeFor(err);
        break;
      }
    }
    await this.init();
    if (failure) {
      this.state.notice = failure;
      this.emit();
    }
    return sent;
  }

  async keepPath(conflictId: string, keepLabel: string, comment: string): Promise<void> {
    await this.guard(async () => {
      await this.api.decideConflict(conflictId, keepLabel, comment, this.version);
      await this.init();
    });
  }

  moveCursor(delta: number): void {
    this.state.reviewCursor += delta;
    this.clampCursor();
    this.emit();
  }

  cursorProposal(): Proposal | null {
    return this.state.proposals[this.state.reviewCursor] ?? null;
  }

  dismissNotice(): void {
    this.state.notice = null;
    this.emit();
  }

  private clampCursor(): void {
    const max = Math.max(0, this.state.proposals.length - 1);
    if (this.state.reviewCursor > max) {
      this.state.reviewCursor = max;
    }
    if (this.state.reviewCursor < 0) {
      this.state.reviewCursor = 0;
    }
  }

  private noticeFor(err: unknown): Notice {
    if (err instanceof ApiError && err.stale) {
      return { kind: "stale", text: "tree changed under you; view refreshed" };
    }
    return { kind: "error", text: err instanceof Error ? err.message : String(err) };
  }

  private async guard(action: () => Promise<void>): Promise<void> {
    try {
      await action();
      this.state.notice = null;
    } catch (err) {
      this.state.notice = this.noticeFor(err);
      if (err instanceof ApiError && err.stale) {
        const notice = this.state.notice;
        await this.init();
        this.state.notice = notice;
      }
    }
    this.emit();
  }
}
