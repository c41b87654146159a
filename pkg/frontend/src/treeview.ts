/**
 * Tree view model: an id-indexed projection of the latest snapshot plus
 * view-only expansion state.
 *
 * The index holds whatever the last GET returned and nothing else; expansion
 * and selection never touch node data. Rendering works off a flattened list
 * of visible rows so the DOM cost is bounded by the viewport, not the tree.
 */

import type { ConflictCase, Proposal, TreeNode, TreeSnapshot } from "./types.js";

export interface TreeIndex {
  version: number;
  nodes: Map<number, TreeNode>;
  childrenOf: Map<number | null, number[]>;
}

export function buildIndex(snapshot: TreeSnapshot): TreeIndex {
  const nodes = new Map<number, TreeNode>();
  const childrenOf = new Map<number | null, number[]>();
  for (const node of snapshot.nodes) {
    nodes.set(node.id, node);
    const siblings = childrenOf.get(node.parent);
    if (siblings) {
      siblings.push(node.id);
    } else {
      childrenOf.set(node.parent, [node.id]);
    }
  }
  for (const ids of childrenOf.values()) {
    ids.sort((a, b) => a - b);
  }
  return { version: snapshot.version, nodes, childrenOf };
}

/** Replace one node's children with a freshly fetched child list. */
export function patchChildren(index: TreeIndex, parentId: number, children: TreeNode[]): void {
  for (const child of children) {
    index.nodes.set(child.id, child);
  }
  index.childrenOf.set(
    parentId,
    children.map((c) => c.id).sort((a, b) => a - b),
  );
}

export function pathNames(index: TreeIndex, nodeId: number): string[] {
  const names: string[] = [];
  let current = index.nodes.get(nodeId);
  while (current) {
    names.push(current.name);
    current = current.parent === null ? undefined : index.nodes.get(current.parent);
  }
  return names.reverse();
}

export interface VisibleRow {
  id: number;
  depth: number;
  hasChildren: boolean;
  expanded: boolean;
}

/**
 * Depth-first flattening of the rows the expansion state makes visible.
 * Pruned nodes stay in the listing (grayed by the renderer); their children
 * are only walked when the row is expanded, same as active ones.
 */
export function flattenVisible(index: TreeIndex, expanded: ReadonlySet<number>): VisibleRow[] {
  const rows: VisibleRow[] = [];
  const roots = index.childrenOf.get(null) ?? [];
  const stack: Array<{ id: number; depth: number }> = [];
  for (let i = roots.length - 1; i >= 0; i--) {
    stack.push({ id: roots[i]!, depth: 0 });
  }
  while (stack.length > 0) {
    const { id, depth } = stack.pop()!;
    const childIds = index.childrenOf.get(id) ?? [];
    const isExpanded = expanded.has(id);
    rows.push({ id, depth, hasChildren: childIds.length > 0, expanded: isExpanded });
    if (isExpanded) {
      for (let i = childIds.length - 1; i >= 0; i--) {
        stack.push({ id: childIds[i]!, depth: depth + 1 });
      }
    }
  }
  return rows;
}

export interface RowWindow {
  start: number;
  end: number;
  padTop: number;
  padBottom: number;
}

/** Slice of the flattened rows that actually needs DOM, plus spacer heights. */
export function windowRows(
  total: number,
  scrollTop: number,
  rowHeight: number,
  viewHeight: number,
  overscan = 10,
): RowWindow {
  const first = Math.floor(scrollTop / rowHeight);
  const visible = Math.ceil(viewHeight / rowHeight);
  const start = Math.max(0, first - overscan);
  const end = Math.min(total, first + visible + overscan);
  return {
    start,
    end,
    padTop: start * rowHeight,
    padBottom: Math.max(0, (total - end) * rowHeight),
  };
}

/**
 * Pending-change badge counts: for every node, how many pending proposals
 * and open conflicts touch its subtree. Proposal paths are resolved by name
 * from the roots; unresolvable prefixes contribute nothing.
 */
export function badgeCounts(
  index: TreeIndex,
  pending: readonly Proposal[],
  conflicts: readonly ConflictCase[],
): Map<number, number> {
  const counts = new Map<number, number>();
  const bump = (id: number) => counts.set(id, (counts.get(id) ?? 0) + 1);

  for (const proposal of pending) {
    for (const id of resolvePathIds(index, proposal.proposed_path)) {
      bump(id);
    }
  }
  for (const conflict of conflicts) {
    for (const leafId of conflict.leaf_ids) {
      let current = index.nodes.get(leafId);
      while (current) {
        bump(current.id);
        current = current.parent === null ? undefined : index.nodes.get(current.parent);
      }
    }
  }
  return counts;
}

/** Node ids along a name path, for as far as the names resolve. */
export function resolvePathIds(index: TreeIndex, path: readonly string[]): number[] {
  const ids: number[] = [];
  let parent: number | null = null;
  for (const name of path) {
    const siblings: number[] = index.childrenOf.get(parent) ?? [];
    const match = siblings.find((id) => index.nodes.get(id)?.name === name);
    if (match === undefined) {
      break;
    }
    ids.push(match);
    parent = match;
  }
  return ids;
}
