"""Incremental attachment of new entities to a frozen core taxonomy.

The frozen skeleton is serialized into the prompt; the model answers with
either an insertion path or an unclassifiable report. Proposals accumulate
in a deferred buffer and are validated against the live tree only at flush
time, so one rendered core can serve a whole batch of attachment calls
without interleaved mutation.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .errors import EmptyCore, ParseFailure
from .taxonomy import MAX_TIER, TaxonomyTree
from .textutil import normalize_name

DEFAULT_TOKEN_BUDGET = 4000
ELLIPSIS_SENTINEL = "..."

REJECT_UNKNOWN_ANCESTOR = "UnknownAncestor"
REJECT_UNFROZEN_ANCESTOR = "UnfrozenAncestor"
REJECT_TIER_LIMIT = "TierLimitExceeded"
REJECT_DUPLICATE_SIBLING = "DuplicateSibling"
REJECT_EMPTY_PATH = "EmptyPath"
REJECT_LEAF_MISMATCH = "LeafMismatch"

ATTACH_TEMPLATE = """\
You are a medical entity taxonomy expert. You must strictly follow the guidelines below to integrate the medical entity noun I provide into the existing medical entity tree.

Maintain Original Structure:
You are NOT allowed to change the names of nodes on the medical entity tree.

Precise Insertion:
Insert the medical entity noun into the appropriate sub-categories of its parent node. Ensure only valid medical entity is inserted and adhere to hierarchical relationships.

Rationality of New Insertions:
If you insert a medical entity into the tree, you must provide the reason for its insertion to ensure interpretability and traceability.
Output Format: <Reason>xxx</Reason>
<InsertionPath>Node1.Node2.InsertedNode</InsertionPath>

Handling Unclassifiable Cases:
Report medical entity noun that cannot be classified and explain the reasons for the uncertainty. If unsure about the classification, provide detailed reasoning.
Output Format: <Reason>xxx</Reason><Reasoning>yyy</Reasoning>

Medical Entity Tree:
{tree}

Medical Entity Noun:
{entity}"""


def escape_angle(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def unescape_angle(text: str) -> str:
    return text.replace("&lt;", "<").replace("&gt;", ">").replace("&amp;", "&")


def _token_estimate(text: str) -> int:
    # chars/4 is the usual rough proxy; exact tokenizer parity is not needed
    # because the budget only bounds prompt size.
    return math.ceil(len(text) / 4)


def serialize_core(tree: TaxonomyTree, token_budget: int = DEFAULT_TOKEN_BUDGET) -> str:
    """Render the frozen skeleton as an indented outline within a budget.

    Deepest tiers are elided first; every parent whose children were cut
    gets one indented ellipsis line so the model can tell the branch
    continues. If even tier 1 alone overflows, the line list is truncated
    with a trailing sentinel.
    """
    if token_budget < 1:
        raise ValueError("token_budget must be >= 1")
    frozen = [n for n in tree.active_nodes() if n.frozen]
    if not frozen:
        raise EmptyCore("tree has no frozen nodes to serialize")
    frozen_ids = {n.id for n in frozen}

    def render(depth_limit: int) -> str:
        lines: list[str] = []

        def walk(node_id: Optional[int]) -> None:
            children = [
                c for c in tree.children_of(node_id) if c.id in frozen_ids and c.active
            ]
            for child in children:
                if child.tier > depth_limit:
                    continue
                lines.append("  " * (child.tier - 1) + child.name)
                grand = [
                    g for g in tree.children_of(child.id) if g.id in frozen_ids and g.active
                ]
                if grand and child.tier + 1 > depth_limit:
                    lines.append("  " * child.tier + ELLIPSIS_SENTINEL)
                else:
                    walk(child.id)

        walk(None)
        return "\n".join(lines)

    for depth_limit in range(MAX_TIER, 0, -1):
        text = render(depth_limit)
        if _token_estimate(text) <= token_budget:
            return text
    # even tier 1 alone is too large: keep a prefix of lines plus sentinel
    lines = render(1).split("\n")
    kept: list[str] = []
    for line in lines:
        candidate = "\n".join(kept + [line, ELLIPSIS_SENTINEL])
        if _token_estimate(candidate) > token_budget:
            break
        kept.append(line)
    return "\n".join(kept + [ELLIPSIS_SENTINEL])


def build_attach_prompt(core_text: str, entity_name: str) -> str:
    if not entity_name.strip():
        raise ValueError("entity_name must be non-empty")
    prompt = ATTACH_TEMPLATE.replace("{tree}", core_text)
    return prompt.replace("{entity}", escape_angle(entity_name.strip()))


@dataclass
class InsertionProposal:
    entity_name: str
    proposed_path: list[str]   # node names root -> new leaf; empty if unclassifiable
    reasoning: str
    status: str = "pending"    # pending | applied | rejected | unclassifiable
    rejection_cause: Optional[str] = None

    def to_json(self) -> dict:
        return {
            "entity_name": self.entity_name,
            "proposed_path": self.proposed_path,
            "reasoning": self.reasoning,
            "status": self.status,
            "rejection_cause": self.rejection_cause,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "InsertionProposal":
        return cls(
            entity_name=obj["entity_name"],
            proposed_path=list(obj.get("proposed_path", [])),
            reasoning=obj.get("reasoning", ""),
            status=obj.get("status", "pending"),
            rejection_cause=obj.get("rejection_cause"),
        )


_REASON = re.compile(r"<Reason>(.*?)</Reason>", re.DOTALL)
_PATH = re.compile(r"<InsertionPath>(.*?)</InsertionPath>", re.DOTALL)
_REASONING = re.compile(r"<Reasoning>(.*?)</Reasoning>", re.DOTALL)


def parse_attach_response(text: str, entity_name: str = "") -> InsertionProposal:
    """Parse either response shape into a proposal.

    Insertion responses must carry a non-empty dot path whose last element
    is the inserted entity; unclassifiable responses carry reason plus
    detailed reasoning and yield a proposal with an empty path.
    """
    reason_m = _REASON.search(text)
    path_m = _PATH.search(text)
    if path_m is not None:
        if reason_m is None:
            raise ParseFailure("insertion response lacks a <Reason> block")
        elements = [unescape_angle(p.strip()) for p in path_m.group(1).split(".")]
        if not elements or any(not e for e in elements):
            raise ParseFailure("insertion path contains empty elements")
        return InsertionProposal(
            entity_name=elements[-1],
            proposed_path=elements,
            reasoning=reason_m.group(1).strip(),
        )
    detail_m = _REASONING.search(text)
    if reason_m is not None and detail_m is not None:
        reasoning = reason_m.group(1).strip()
        detail = detail_m.group(1).strip()
        if detail:
            reasoning = f"{reasoning}\n{detail}" if reasoning else detail
        return InsertionProposal(
            entity_name=entity_name,
            proposed_path=[],
            reasoning=reasoning,
            status="unclassifiable",
        )
    raise ParseFailure("response matches neither insertion nor unclassifiable format")


def validate_proposal(
    tree: TaxonomyTree,
    proposal: InsertionProposal,
    allowed_ancestors: Optional[set[int]] = None,
) -> Optional[str]:
    """Return a rejection cause, or None when the proposal can be applied.

    allowed_ancestors restricts which existing nodes may serve as ancestors;
    the deferred flush passes the pre-flush node set so that one proposal
    cannot stack on top of another from the same batch.
    """
    path = proposal.proposed_path
    if not path:
        return REJECT_EMPTY_PATH
    if normalize_name(path[-1]) != normalize_name(proposal.entity_name):
        return REJECT_LEAF_MISMATCH
    if len(path) > MAX_TIER:
        return REJECT_TIER_LIMIT
    parent_id: Optional[int] = None
    for name in path[:-1]:
        want = normalize_name(name)
        found = None
        for child in tree.children_of(parent_id):
            if child.active and normalize_name(child.name) == want:
                found = child
                break
        if found is None:
            return REJECT_UNKNOWN_ANCESTOR
        if allowed_ancestors is not None and found.id not in allowed_ancestors:
            return REJECT_UNFROZEN_ANCESTOR
        parent_id = found.id
    leaf = normalize_name(path[-1])
    for child in tree.children_of(parent_id):
        if child.active and normalize_name(child.name) == leaf:
            return REJECT_DUPLICATE_SIBLING
    return None


def _resolve_parent(tree: TaxonomyTree, path: list[str]) -> Optional[int]:
    parent_id: Optional[int] = None
    for name in path[:-1]:
        want = normalize_name(name)
        for child in tree.children_of(parent_id):
            if child.active and normalize_name(child.name) == want:
                parent_id = child.id
                break
    return parent_id


@dataclass
class DeferredBuffer:
    """Proposals awaiting batch application against a tree version."""

    core_version: int
    proposals: list[InsertionProposal] = field(default_factory=list)

    def add(self, proposal: InsertionProposal) -> None:
        self.proposals.append(proposal)

    def __len__(self) -> int:
        return len(self.proposals)


def flush(
    tree: TaxonomyTree,
    buffer: DeferredBuffer,
    actor: str = "llm",
    axis_for: Optional[Callable[[str], str]] = None,
) -> tuple[int, list[InsertionProposal]]:
    """Apply buffered proposals in order; returns (applied count, rejected).

    Ancestors must exist before the flush started: a proposal may not route
    through a node created earlier in the same flush. Duplicate-sibling
    checks do see the live tree, so the second of two identical proposals
    rejects. Unclassifiable proposals pass through untouched. Each applied
    proposal appends exactly one insert audit record.
    """
    if buffer.core_version > tree.version:
        raise ValueError(
            f"buffer built against version {buffer.core_version}, tree is at {tree.version}"
        )
    preexisting = set(tree.nodes.keys())
    applied = 0
    rejected: list[InsertionProposal] = []
    for proposal in buffer.proposals:
        if proposal.status != "pending":
            continue
        cause = validate_proposal(tree, proposal, allowed_ancestors=preexisting)
        if cause is not None:
            proposal.status = "rejected"
            proposal.rejection_cause = cause
            rejected.append(proposal)
            tree.record_rejection(
                proposal.proposed_path or [proposal.entity_name],
                f"{cause}: {proposal.reasoning}",
                actor=actor,
            )
            continue
        parent_id = _resolve_parent(tree, proposal.proposed_path)
        if parent_id is not None:
            axis = tree.node(parent_id).axis
        elif axis_for is not None:
            axis = axis_for(proposal.entity_name)
        else:
            axis = "other"
        tree.add_node(
            parent_id,
            proposal.proposed_path[-1],
            axis,
            actor=actor,
            reasoning=proposal.reasoning,
        )
        proposal.status = "applied"
        applied += 1
    buffer.proposals = []
    return applied, rejected


def save_proposals(path: str | Path, proposals: list[InsertionProposal]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for proposal in proposals:
            fh.write(json.dumps(proposal.to_json(), ensure_ascii=False) + "\n")


def load_proposals(path: str | Path) -> list[InsertionProposal]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(InsertionProposal.from_json(json.loads(line)))
    return out


def attach_entities(
    tree: TaxonomyTree,
    entities: list[str],
    provider,
    token_budget: int = DEFAULT_TOKEN_BUDGET,
    flush_size: int = 50,
    actor: str = "llm",
    axis_for: Optional[Callable[[str], str]] = None,
) -> tuple[int, list[InsertionProposal]]:
    """Drive attachment for a batch of entity names.

    Prompts always render the frozen core only, so applied-but-unfrozen
    nodes never leak into later prompts within the run. Returns total
    applied count and the full proposal list (applied, rejected and
    unclassifiable).
    """
    if flush_size < 1:
        raise ValueError("flush_size must be >= 1")
    all_proposals: list[InsertionProposal] = []
    applied_total = 0
    buffer = DeferredBuffer(core_version=tree.version)
    core_text = serialize_core(tree, token_budget)
    for name in entities:
        prompt = build_attach_prompt(core_text, name)
        response = provider.generate(prompt)
        try:
            proposal = parse_attach_response(response, entity_name=name)
        except ParseFailure as exc:
            proposal = InsertionProposal(
                entity_name=name,
                proposed_path=[],
                reasoning=str(exc),
                status="rejected",
                rejection_cause="ParseFailure",
            )
        all_proposals.append(proposal)
        if proposal.status == "pending":
            buffer.add(proposal)
        if len(buffer) >= flush_size:
            applied, _ = flush(tree, buffer, actor=actor, axis_for=axis_for)
            applied_total += applied
            buffer = DeferredBuffer(core_version=tree.version)
    if len(buffer):
        applied, _ = flush(tree, buffer, actor=actor, axis_for=axis_for)
        applied_total += applied
    return applied_total, all_proposals
