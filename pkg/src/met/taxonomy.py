"""Medical Entity Tree data model: nodes, mutation log, persistence, invariants.

The tree is a forest of typed entity nodes on five tiers (1 = coarsest
category, 5 = entity leaf); there is no stored root. Every mutation goes
through one writer, appends exactly one audit record, and bumps the
version counter, so replaying the audit log from an empty tree reproduces
the final state and readers can hold immutable snapshots keyed by version.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable, Iterable, Optional

from .errors import (
    DuplicateSibling,
    FrozenNode,
    InvariantViolation,
    IoFailure,
    NotFound,
    ParentNotFound,
    SchemaVersionMismatch,
    StalePath,
    TierLimitExceeded,
)
from .textutil import normalize_name

AXES = ("disease", "anatomy", "modality", "symptom", "procedure", "drug", "other")
ACTORS = ("llm", "agent", "rule", "human")
# `freeze` is not in the original operation set but the curation surface
# needs an audited freeze mutation; see the service module.
OPERATIONS = ("insert", "reject", "prune", "resolve", "rename", "freeze")

MAX_TIER = 5
SNAPSHOT_SCHEMA = 1


@dataclass
class EntityNode:
    id: int
    name: str
    axis: str
    tier: int
    parent_id: Optional[int] = None
    frequency: int = 0
    embedding: Optional[list[float]] = None
    frozen: bool = False
    status: str = "active"

    @property
    def active(self) -> bool:
        return self.status == "active"


@dataclass
class AuditRecord:
    """One entry of the append-only mutation log.

    `params` carries the mutation arguments (axis, frequency, frozen flag,
    new name, ...) that node_path/reasoning cannot encode, so a replay of
    the log is lossless. `reject` records are audit-only: they do not
    mutate the tree and do not advance the version counter.
    """

    timestamp: str
    actor: str
    operation: str
    node_path: list[str]
    reasoning: str
    evidence: Optional[list[str]] = None
    params: Optional[dict] = None

    def to_json(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "actor": self.actor,
            "operation": self.operation,
            "node_path": self.node_path,
            "reasoning": self.reasoning,
            "evidence": self.evidence,
            "params": self.params,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AuditRecord":
        return cls(
            timestamp=obj["timestamp"],
            actor=obj["actor"],
            operation=obj["operation"],
            node_path=list(obj["node_path"]),
            reasoning=obj.get("reasoning", ""),
            evidence=obj.get("evidence"),
            params=obj.get("params"),
        )


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class TaxonomyTree:
    """Forest of EntityNodes with a name index and an audit trail.

    All mutators validate their preconditions, append one AuditRecord and
    increment `version`. An optional `audit_sink` callable receives each
    record as it is appended (used for the JSONL log file).
    """

    def __init__(self) -> None:
        self.nodes: dict[int, EntityNode] = {}
        self.name_index: dict[str, set[int]] = {}
        self.version: int = 0
        self.audit: list[AuditRecord] = []
        self.audit_sink: Optional[Callable[[AuditRecord], None]] = None
        self._next_id: int = 1

    # ------------------------------------------------------------------ reads

    def node(self, node_id: int) -> EntityNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise NotFound(f"node {node_id} does not exist") from None

    def children_of(self, node_id: Optional[int], active_only: bool = True) -> list[EntityNode]:
        out = [
            n
            for n in self.nodes.values()
            if n.parent_id == node_id and (n.active or not active_only)
        ]
        out.sort(key=lambda n: n.id)
        return out

    def roots(self, active_only: bool = True) -> list[EntityNode]:
        return self.children_of(None, active_only=active_only)

    def active_nodes(self) -> Iterable[EntityNode]:
        return (n for n in self.nodes.values() if n.active)

    def by_name(self, name: str) -> list[EntityNode]:
        ids = self.name_index.get(normalize_name(name), set())
        return [self.nodes[i] for i in sorted(ids)]

    def path_of(self, node_id: int) -> list[str]:
        """Ordered root-to-node name list; length equals the node's tier.

        Raises StalePath if the node or any ancestor has been pruned.
        """
        node = self.node(node_id)
        chain: list[EntityNode] = []
        cur: Optional[EntityNode] = node
        while cur is not None:
            chain.append(cur)
            cur = self.nodes.get(cur.parent_id) if cur.parent_id is not None else None
        if any(not n.active for n in chain):
            raise StalePath(f"path of node {node_id} crosses a pruned node")
        return [n.name for n in reversed(chain)]

    def resolve_path(self, names: list[str]) -> EntityNode:
        """Walk name components from tier 1 down; NotFound if the chain breaks."""
        parent_id: Optional[int] = None
        node: Optional[EntityNode] = None
        for name in names:
            key = normalize_name(name)
            node = None
            for child in self.children_of(parent_id):
                if normalize_name(child.name) == key:
                    node = child
                    break
            if node is None:
                raise NotFound(f"no active node named {name!r} at {names}")
            parent_id = node.id
        if node is None:
            raise NotFound("empty path")
        return node

    def subtree_ids(self, node_id: int) -> list[int]:
        """node_id plus all descendants, depth-first, any status."""
        out = []
        stack = [node_id]
        while stack:
            nid = stack.pop()
            out.append(nid)
            stack.extend(
                n.id for n in self.nodes.values() if n.parent_id == nid
            )
        return out

    # --------------------------------------------------------------- mutators

    def _record(self, record: AuditRecord, mutates: bool = True) -> None:
        self.audit.append(record)
        if mutates:
            self.version += 1
        if self.audit_sink is not None:
            self.audit_sink(record)

    def _index_add(self, node: EntityNode) -> None:
        self.name_index.setdefault(normalize_name(node.name), set()).add(node.id)

    def _index_remove(self, node: EntityNode) -> None:
        key = normalize_name(node.name)
        ids = self.name_index.get(key)
        if ids is not None:
            ids.discard(node.id)
            if not ids:
                del self.name_index[key]

    def _check_sibling_name(self, parent_id: Optional[int], name: str) -> None:
        key = normalize_name(name)
        for sib in self.children_of(parent_id):
            if normalize_name(sib.name) == key:
                raise DuplicateSibling(
                    f"active sibling named {name!r} already exists under {parent_id}"
                )

    def add_node(
        self,
        parent_id: Optional[int],
        name: str,
        axis: str,
        frequency: int = 0,
        frozen: bool = False,
        embedding: Optional[list[float]] = None,
        actor: str = "rule",
        reasoning: str = "",
        evidence: Optional[list[str]] = None,
    ) -> int:
        if axis not in AXES:
            raise ValueError(f"unknown axis {axis!r}")
        if not name or not name.strip():
            raise ValueError("node name must be non-empty")
        if parent_id is None:
            tier = 1
        else:
            parent = self.nodes.get(parent_id)
            if parent is None or not parent.active:
                raise ParentNotFound(f"parent {parent_id} missing or pruned")
            tier = parent.tier + 1
        if tier > MAX_TIER:
            raise TierLimitExceeded(f"insertion at tier {tier} exceeds the {MAX_TIER}-tier cap")
        self._check_sibling_name(parent_id, name)

        node = EntityNode(
            id=self._next_id,
            name=name.strip(),
            axis=axis,
            tier=tier,
            parent_id=parent_id,
            frequency=frequency,
            embedding=list(embedding) if embedding is not None else None,
            frozen=frozen,
        )
        self._next_id += 1
        self.nodes[node.id] = node
        self._index_add(node)
        path = self.path_of(node.id)
        self._record(
            AuditRecord(
                timestamp=_now(),
                actor=actor,
                operation="insert",
                node_path=path,
                reasoning=reasoning,
                evidence=evidence,
                params={"axis": axis, "frequency": frequency, "frozen": frozen},
            )
        )
        return node.id

    def prune_subtree(
        self,
        node_id: int,
        reasoning: str,
        actor: str = "human",
        evidence: Optional[list[str]] = None,
        operation: str = "prune",
    ) -> int:
        """Soft-delete a node and all descendants; returns the pruned count.

        Automated actors cannot touch any frozen node in the subtree.
        Re-pruning an already pruned node is a no-op (0, no audit record).
        """
        node = self.node(node_id)
        if not node.active:
            return 0
        path = self.path_of(node_id)
        ids = self.subtree_ids(node_id)
        if actor != "human" and any(self.nodes[i].frozen for i in ids):
            raise FrozenNode(f"actor {actor!r} may not prune frozen node in subtree of {node_id}")
        count = 0
        for nid in ids:
            n = self.nodes[nid]
            if n.active:
                n.status = "pruned"
                count += 1
        self._record(
            AuditRecord(
                timestamp=_now(),
                actor=actor,
                operation=operation,
                node_path=path,
                reasoning=reasoning,
                evidence=evidence,
            )
        )
        return count

    def rename_node(self, node_id: int, new_name: str, actor: str, reasoning: str = "") -> None:
        node = self.node(node_id)
        if not node.active:
            raise StalePath(f"node {node_id} is pruned")
        if node.frozen and actor != "human":
            raise FrozenNode(f"actor {actor!r} may not rename frozen node {node_id}")
        if not new_name or not new_name.strip():
            raise ValueError("new name must be non-empty")
        old_path = self.path_of(node_id)
        key_new = normalize_name(new_name)
        for sib in self.children_of(node.parent_id):
            if sib.id != node_id and normalize_name(sib.name) == key_new:
                raise DuplicateSibling(f"sibling named {new_name!r} exists")
        self._index_remove(node)
        node.name = new_name.strip()
        self._index_add(node)
        self._record(
            AuditRecord(
                timestamp=_now(),
                actor=actor,
                operation="rename",
                node_path=old_path,
                reasoning=reasoning,
                params={"new_name": node.name},
            )
        )

    def freeze_node(self, node_id: int, actor: str = "human", reasoning: str = "") -> None:
        node = self.node(node_id)
        if not node.active:
            raise StalePath(f"node {node_id} is pruned")
        if node.frozen:
            return
        path = self.path_of(node_id)
        node.frozen = True
        self._record(
            AuditRecord(
                timestamp=_now(),
                actor=actor,
                operation="freeze",
                node_path=path,
                reasoning=reasoning,
            )
        )

    def record_rejection(
        self,
        node_path: list[str],
        reasoning: str,
        actor: str = "llm",
        evidence: Optional[list[str]] = None,
    ) -> None:
        """Audit-only record for a rejected proposal; does not mutate the tree."""
        self._record(
            AuditRecord(
                timestamp=_now(),
                actor=actor,
                operation="reject",
                node_path=node_path,
                reasoning=reasoning,
                evidence=evidence,
            ),
            mutates=False,
        )

    # ---------------------------------------------------------- persistence

    def to_snapshot(self) -> dict:
        nodes = []
        for nid in sorted(self.nodes):
            n = self.nodes[nid]
            nodes.append(
                {
                    "id": n.id,
                    "name": n.name,
                    "axis": n.axis,
                    "tier": n.tier,
                    "parent": n.parent_id,
                    "frequency": n.frequency,
                    "frozen": n.frozen,
                    "status": n.status,
                }
            )
        return {"schema": SNAPSHOT_SCHEMA, "version": self.version, "nodes": nodes}

    def snapshot_bytes(self) -> bytes:
        """Canonical serialization; equal trees serialize to equal bytes."""
        return (
            json.dumps(self.to_snapshot(), sort_keys=True, ensure_ascii=False, separators=(",", ":"))
            + "\n"
        ).encode("utf-8")

    def check_invariants(self) -> None:
        """Raise InvariantViolation if the structural rules are broken."""
        for n in self.nodes.values():
            if n.tier < 1 or n.tier > MAX_TIER:
                raise InvariantViolation(f"node {n.id} has tier {n.tier}")
            if n.parent_id is not None:
                parent = self.nodes.get(n.parent_id)
                if parent is None:
                    raise InvariantViolation(f"node {n.id} has missing parent {n.parent_id}")
                if n.tier != parent.tier + 1:
                    raise InvariantViolation(
                        f"node {n.id} tier {n.tier} != parent tier {parent.tier} + 1"
                    )
                if n.active and not parent.active:
                    raise InvariantViolation(f"active node {n.id} under pruned parent")
            elif n.tier != 1:
                raise InvariantViolation(f"parentless node {n.id} at tier {n.tier}")
        # cycle check: walk each node's parent chain with a step budget
        limit = len(self.nodes) + 1
        for n in self.nodes.values():
            cur, steps = n, 0
            while cur.parent_id is not None:
                cur = self.nodes[cur.parent_id]
                steps += 1
                if steps > limit:
                    raise InvariantViolation(f"cycle through node {n.id}")
        # sibling-name uniqueness among active nodes
        seen: dict[tuple[Optional[int], str], int] = {}
        for n in self.nodes.values():
            if not n.active:
                continue
            key = (n.parent_id, normalize_name(n.name))
            if key in seen:
                raise InvariantViolation(
                    f"duplicate active siblings {seen[key]} and {n.id} named {n.name!r}"
                )
            seen[key] = n.id
        # index consistency
        expected: dict[str, set[int]] = {}
        for n in self.nodes.values():
            expected.setdefault(normalize_name(n.name), set()).add(n.id)
        if expected != self.name_index:
            raise InvariantViolation("name_index inconsistent with node table")


def snapshot_save(tree: TaxonomyTree, destination) -> None:
    """Atomically write the canonical snapshot JSON to `destination`."""
    tree.check_invariants()
    data = tree.snapshot_bytes()
    destination = os.fspath(destination)
    tmp = destination + ".tmp"
    try:
        with open(tmp, "wb") as f:
            f.write(data)
        os.replace(tmp, destination)
    except OSError as exc:
        raise IoFailure(f"cannot write snapshot to {destination}: {exc}") from exc


def snapshot_load(source: str) -> TaxonomyTree:
    try:
        with open(source, "rb") as f:
            obj = json.loads(f.read().decode("utf-8"))
    except OSError as exc:
        raise IoFailure(f"cannot read snapshot from {source}: {exc}") from exc
    except ValueError as exc:
        raise IoFailure(f"snapshot {source} is not valid JSON: {exc}") from exc
    return tree_from_snapshot(obj)


def tree_from_snapshot(obj: dict) -> TaxonomyTree:
    if not isinstance(obj, dict) or obj.get("schema") != SNAPSHOT_SCHEMA:
        raise SchemaVersionMismatch(f"unsupported snapshot schema {obj.get('schema')!r}")
    tree = TaxonomyTree()
    tree.version = int(obj.get("version", 0))
    for rec in obj.get("nodes", []):
        node = EntityNode(
            id=int(rec["id"]),
            name=rec["name"],
            axis=rec["axis"],
            tier=int(rec["tier"]),
            parent_id=rec["parent"],
            frequency=int(rec.get("frequency", 0)),
            frozen=bool(rec.get("frozen", False)),
            status=rec.get("status", "active"),
        )
        if node.axis not in AXES:
            raise InvariantViolation(f"node {node.id} has unknown axis {node.axis!r}")
        if node.id in tree.nodes:
            raise InvariantViolation(f"duplicate node id {node.id}")
        tree.nodes[node.id] = node
        tree._index_add(node)
    tree._next_id = max(tree.nodes, default=0) + 1
    tree.check_invariants()
    return tree


# ------------------------------------------------------------------ audit log


def append_audit(path: str, record: AuditRecord) -> None:
    try:
        with open(path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record.to_json(), ensure_ascii=False) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot append audit record to {path}: {exc}") from exc


def read_audit(path: str) -> list[AuditRecord]:
    try:
        with open(path, encoding="utf-8") as f:
            return [AuditRecord.from_json(json.loads(line)) for line in f if line.strip()]
    except OSError as exc:
        raise IoFailure(f"cannot read audit log from {path}: {exc}") from exc


def replay_audit(records: Iterable[AuditRecord]) -> TaxonomyTree:
    """Rebuild a tree by applying the mutation log to an empty tree.

    Rejection records are skipped (they never mutated state). The rebuilt
    tree carries fresh sequential ids, so equality with the source tree is
    structural: compare snapshot_bytes() of both after an id-stable build,
    or rely on the fact that both assigned ids in the same insert order.
    """
    tree = TaxonomyTree()
    for rec in records:
        if rec.operation == "insert":
            params = rec.params or {}
            parent = tree.resolve_path(rec.node_path[:-1]) if len(rec.node_path) > 1 else None
            tree.add_node(
                parent_id=parent.id if parent is not None else None,
                name=rec.node_path[-1],
                axis=params.get("axis", "other"),
                frequency=params.get("frequency", 0),
                frozen=params.get("frozen", False),
                actor=rec.actor,
                reasoning=rec.reasoning,
                evidence=rec.evidence,
            )
        elif rec.operation in ("prune", "resolve"):
            node = tree.resolve_path(rec.node_path)
            tree.prune_subtree(
                node.id,
                reasoning=rec.reasoning,
                actor=rec.actor,
                evidence=rec.evidence,
                operation=rec.operation,
            )
        elif rec.operation == "rename":
            node = tree.resolve_path(rec.node_path)
            tree.rename_node(node.id, (rec.params or {})["new_name"], actor=rec.actor)
        elif rec.operation == "freeze":
            node = tree.resolve_path(rec.node_path)
            tree.freeze_node(node.id, actor=rec.actor, reasoning=rec.reasoning)
        elif rec.operation == "reject":
            pass
        else:
            raise InvariantViolation(f"unknown audit operation {rec.operation!r}")
    return tree
