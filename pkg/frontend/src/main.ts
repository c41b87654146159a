/**
 * Browser shell: binds the store to the three panes and translates DOM
 * events into store actions. All markup comes from render.ts; this file
 * only owns element lookups, delegation, and the virtualized scroll math.
 */

import { ApiClient } from "./api.js";
import { AppStore } from "./store.js";
import { triageActionFor } from "./keyboard.js";
import {
  renderAudit,
  renderBreadcrumbs,
  renderConflicts,
  renderNotice,
  renderProposals,
  renderResolvedCases,
  renderTreeWindow,
} from "./render.js";
import { badgeCounts, flattenVisible, pathNames, windowRows } from "./treeview.js";

const ROW_HEIGHT = 28; // keep in sync with .tree-row height in style.css

function apiBase(): string {
  const fromQuery = new URLSearchParams(window.location.search).get("api");
  if (fromQuery) {
    return fromQuery.replace(/\/$/, "");
  }
  const injected = (window as unknown as { MET_API_BASE?: string }).MET_API_BASE;
  return (injected ?? "http://127.0.0.1:8040").replace(/\/$/, "");
}

const api = new ApiClient(apiBase());
const store = new AppStore(api);

const el = (id: string): HTMLElement => {
  const found = document.getElementById(id);
  if (!found) {
    throw new Error(`missing element #${id}`);
  }
  return found;
};

const versionLabel = el("version-label");
const noticeBox = el("notice");
const breadcrumbs = el("breadcrumbs");
const treeScroll = el("tree-scroll");
const treeBody = el("tree-body");
const proposalList = el("proposal-list");
const conflictPane = el("conflict-pane");
const auditPane = el("audit-pane");
const commentInput = el("comment") as HTMLInputElement;
const queueCount = el("queue-count");

let activeTab = "review";

function comment(): string {
  return commentInput.value.trim();
}

function renderTree(): void {
  const tree = store.state.tree;
  if (!tree) {
    treeBody.innerHTML = `<p class="muted">loading…</p>`;
    return;
  }
  const rows = flattenVisible(tree, store.state.expanded);
  const win = windowRows(
    rows.length,
    treeScroll.scrollTop,
    ROW_HEIGHT,
    treeScroll.clientHeight || 600,
  );
  const badges = badgeCounts(tree, store.state.proposals, store.state.conflicts);
  treeBody.innerHTML = renderTreeWindow(
    rows,
    tree,
    win.start,
    win.end,
    win.padTop,
    win.padBottom,
    store.state.selection,
    badges,
  );
}

function renderAll(): void {
  const { tree, selection, proposals, conflicts, audit, notice, reviewCursor } = store.state;
  versionLabel.textContent = tree ? `tree v${tree.version}` : "connecting…";
  noticeBox.innerHTML = renderNotice(notice);
  breadcrumbs.innerHTML = renderBreadcrumbs(
    tree && selection !== null ? pathNames(tree, selection) : [],
  );
  renderTree();
  proposalList.innerHTML = renderProposals(proposals, reviewCursor);
  queueCount.textContent = String(proposals.length);
  conflictPane.innerHTML = renderConflicts(conflicts, audit) + renderResolvedCases(audit);
  auditPane.innerHTML = renderAudit(audit);
  for (const tab of document.querySelectorAll<HTMLElement>("[data-tab]")) {
    tab.classList.toggle("active", tab.dataset.tab === activeTab);
  }
  for (const pane of document.querySelectorAll<HTMLElement>("[data-pane]")) {
    pane.hidden = pane.dataset.pane !== activeTab;
  }
}

function actionTarget(event: Event): HTMLElement | null {
  const target = event.target;
  if (!(target instanceof Element)) {
    return null;
  }
  return target.closest<HTMLElement>("[data-act]");
}

treeBody.addEventListener("click", (event) => {
  const hit = actionTarget(event);
  if (!hit) return;
  const id = Number(hit.dataset.id);
  switch (hit.dataset.act) {
    case "toggle":
      void store.toggle(id);
      break;
    case "select":
      store.select(id);
      break;
    case "freeze":
      void store.freeze(id, comment() || "frozen during review");
      break;
    case "prune":
      void store.prune(id, comment() || "pruned during review");
      break;
  }
});

el("side-pane").addEventListener("click", (event) => {
  const hit = actionTarget(event);
  if (!hit) return;
  switch (hit.dataset.act) {
    case "approve":
      void store.approve(hit.dataset.pid ?? "", comment());
      break;
    case "reject":
      void store.reject(hit.dataset.pid ?? "", comment());
      break;
    case "keep":
      void store.keepPath(hit.dataset.cid ?? "", hit.dataset.label ?? "", comment());
      break;
    case "bulk-approve":
      void store.bulkApprove(store.state.proposals.map((p) => p.id));
      break;
    case "tab":
      activeTab = hit.dataset.tab ?? "review";
      renderAll();
      break;
  }
});

noticeBox.addEventListener("click", (event) => {
  const hit = actionTarget(event);
  if (hit?.dataset.act === "dismiss") {
    store.dismissNotice();
  }
});

el("refresh").addEventListener("click", () => {
  void store.refresh();
});

treeScroll.addEventListener("scroll", renderTree);
window.addEventListener("resize", renderTree);

document.addEventListener("keydown", (event) => {
  const inTextField =
    event.target instanceof HTMLInputElement || event.target instanceof HTMLTextAreaElement;
  const action = triageActionFor(event.key, inTextField);
  if (!action || activeTab !== "review") {
    return;
  }
  event.preventDefault();
  if (action.kind === "move") {
    store.moveCursor(action.delta);
    return;
  }
  const current = store.cursorProposal();
  if (!current) {
    return;
  }
  if (action.kind === "approve") {
    void store.approve(current.id, comment());
  } else {
    void store.reject(current.id, comment());
  }
});

store.subscribe(renderAll);
renderAll();
void store.init().catch((err) => {
  noticeBox.innerHTML = renderNotice({
    kind: "error",
    text: err instanceof Error ? err.message : String(err),
  });
});
