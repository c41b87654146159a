/**
 * HTML renderers: pure functions from projected state to markup strings.
 *
 * Everything that came over the wire goes through escapeHtml, so evidence
 * snippets and reasoning render verbatim as text no matter what they
 * contain. Buttons carry data- attributes; the shell wires them up with one
 * delegated listener per pane.
 */

import type { AuditRecord, ConflictCase, Proposal, TreeNode } from "./types.js";
import type { TreeIndex, VisibleRow } from "./treeview.js";

export function escapeHtml(raw: string): string {
  return raw
    .replaceAll("&", "&amp;")
    .replaceAll("<", "&lt;")
    .replaceAll(">", "&gt;")
    .replaceAll('"', "&quot;")
    .replaceAll("'", "&#39;");
}

function attr(value: string): string {
  return escapeHtml(value);
}

export function renderTreeRow(
  row: VisibleRow,
  node: TreeNode,
  selected: boolean,
  badge: number,
): string {
  const classes = ["tree-row"];
  if (node.status === "pruned") classes.push("pruned");
  if (selected) classes.push("selected");
  const twist = row.hasChildren ? (row.expanded ? "▾" : "▸") : "·";
  const badgeHtml = badge > 0 ? `<span class="badge pending">${badge}</span>` : "";
  const frozenHtml = node.frozen ? `<span class="badge frozen">frozen</span>` : "";
  const prunedHtml = node.status === "pruned" ? `<span class="badge gone">pruned</span>` : "";
  return (
    `<div class="${classes.join(" ")}" data-id="${node.id}" style="padding-left:${row.depth * 18}px">` +
    `<button class="twist" data-act="toggle" data-id="${node.id}">${twist}</button>` +
    `<span class="name" data-act="select" data-id="${node.id}">${escapeHtml(node.name)}</span>` +
    `<span class="badge tier">T${node.tier}</span>` +
    `<span class="badge axis">${escapeHtml(node.axis)}</span>` +
    `<span class="freq">${node.frequency}</span>` +
    frozenHtml +
    prunedHtml +
    badgeHtml +
    `<span class="row-actions">` +
    `<button data-act="freeze" data-id="${node.id}" ${node.frozen ? "disabled" : ""}>freeze</button>` +
    `<button data-act="prune" data-id="${node.id}" ${node.status === "pruned" ? "disabled" : ""}>prune</button>` +
    `</span>` +
    `</div>`
  );
}

export function renderTreeWindow(
  rows: readonly VisibleRow[],
  index: TreeIndex,
  start: number,
  end: number,
  padTop: number,
  padBottom: number,
  selection: number | null,
  badges: ReadonlyMap<number, number>,
): string {
  const parts: string[] = [`<div style="height:${padTop}px"></div>`];
  for (let i = start; i < end; i++) {
    const row = rows[i];
    if (!row) continue;
    const node = index.nodes.get(row.id);
    if (!node) continue;
    parts.push(renderTreeRow(row, node, selection === row.id, badges.get(row.id) ?? 0));
  }
  parts.push(`<div style="height:${padBottom}px"></div>`);
  return parts.join("");
}

export function renderBreadcrumbs(path: readonly string[]): string {
  if (path.length === 0) {
    return `<span class="crumb muted">no selection</span>`;
  }
  return path
    .map((name) => `<span class="crumb">${escapeHtml(name)}</span>`)
    .join(`<span class="crumb-sep">›</span>`);
}

export function renderProposals(proposals: readonly Proposal[], cursor: number): string {
  if (proposals.length === 0) {
    return `<p class="muted">review queue is empty</p>`;
  }
  const items = proposals.map((p, i) => {
    const active = i === cursor ? " cursor" : "";
    return (
      `<div class="card proposal${active}" data-pid="${attr(p.id)}">` +
      `<div class="card-head"><strong>${escapeHtml(p.entity_name)}</strong>` +
      `<code>${escapeHtml(p.proposed_path.join("."))}</code></div>` +
      `<p class="reasoning">${escapeHtml(p.reasoning)}</p>` +
      `<div class="card-actions">` +
      `<button data-act="approve" data-pid="${attr(p.id)}">approve (a)</button>` +
      `<button data-act="reject" data-pid="${attr(p.id)}">reject (r)</button>` +
      `</div>` +
      `</div>`
    );
  });
  return items.join("");
}

/** Audit records whose node path ends at the conflicted entity name. */
export function auditHistoryFor(entity: string, audit: readonly AuditRecord[]): AuditRecord[] {
  const lowered = entity.toLowerCase();
  return audit.filter((r) => (r.node_path[r.node_path.length - 1] ?? "").toLowerCase() === lowered);
}

export function renderConflict(
  conflict: ConflictCase,
  history: readonly AuditRecord[],
): string {
  const columns = conflict.paths
    .map((path, i) => {
      const label = conflict.labels[i] ?? `path_${i}`;
      return (
        `<div class="conflict-path">` +
        `<div class="path-label">${escapeHtml(label)}</div>` +
        `<code>${escapeHtml(path.join("."))}</code>` +
        `<button data-act="keep" data-cid="${attr(conflict.id)}" data-label="${attr(label)}">` +
        `keep this path</button>` +
        `</div>`
      );
    })
    .join("");
  const transcript = history
    .map(
      (r) =>
        `<div class="evidence-item">` +
        `<span class="badge actor">${escapeHtml(r.actor)}</span>` +
        `<span class="badge op">${escapeHtml(r.operation)}</span>` +
        `<p class="reasoning">${escapeHtml(r.reasoning)}</p>` +
        (r.evidence ?? []).map((e) => `<pre class="snippet">${escapeHtml(e)}</pre>`).join("") +
        `</div>`,
    )
    .join("");
  return (
    `<div class="card conflict" data-cid="${attr(conflict.id)}">` +
    `<div class="card-head"><strong>${escapeHtml(conflict.entity)}</strong></div>` +
    `<div class="conflict-columns">${columns}</div>` +
    `<details class="evidence"><summary>evidence & history (${history.length})</summary>` +
    (transcript || `<p class="muted">no recorded history for this entity yet</p>`) +
    `</details>` +
    `</div>`
  );
}

export function renderConflicts(
  conflicts: readonly ConflictCase[],
  audit: readonly AuditRecord[],
): string {
  if (conflicts.length === 0) {
    return `<p class="muted">no open conflicts</p>`;
  }
  return conflicts.map((c) => renderConflict(c, auditHistoryFor(c.entity, audit))).join("");
}

/** Resolved cases are rebuilt read-only from resolve operations in the log. */
export function renderResolvedCases(audit: readonly AuditRecord[]): string {
  const resolved = audit.filter((r) => r.operation === "resolve");
  if (resolved.length === 0) {
    return "";
  }
  const items = resolved.map(
    (r) =>
      `<div class="card resolved">` +
      `<div class="card-head"><strong>${escapeHtml(r.node_path[r.node_path.length - 1] ?? "")}</strong>` +
      `<span class="badge gone">pruned</span>` +
      `<code>${escapeHtml(r.node_path.join("."))}</code></div>` +
      `<p class="reasoning">${escapeHtml(r.reasoning)}</p>` +
      (r.evidence ?? []).map((e) => `<pre class="snippet">${escapeHtml(e)}</pre>`).join("") +
      `</div>`,
  );
  return `<h3>resolved</h3>` + items.join("");
}

export function renderAudit(records: readonly AuditRecord[]): string {
  if (records.length === 0) {
    return `<p class="muted">audit log is empty</p>`;
  }
  const rows = [...records]
    .reverse()
    .map(
      (r) =>
        `<div class="audit-row">` +
        `<span class="badge op">${escapeHtml(r.operation)}</span>` +
        `<span class="badge actor">${escapeHtml(r.actor)}</span>` +
        `<code>${escapeHtml(r.node_path.join("."))}</code>` +
        `<span class="when">${escapeHtml(r.timestamp)}</span>` +
        (r.reasoning ? `<p class="reasoning">${escapeHtml(r.reasoning)}</p>` : "") +
        (r.evidence ?? []).map((e) => `<pre class="snippet">${escapeHtml(e)}</pre>`).join("") +
        `</div>`,
    );
  return rows.join("");
}

export function renderNotice(notice: { kind: string; text: string } | null): string {
  if (!notice) {
    return "";
  }
  return (
    `<div class="toast ${attr(notice.kind)}">` +
    `${escapeHtml(notice.text)}` +
    `<button data-act="dismiss">×</button>` +
    `</div>`
  );
}
