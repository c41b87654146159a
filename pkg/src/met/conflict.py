"""Detection and adjudication of duplicate-placement conflicts.

A conflict is one entity name appearing as an active leaf under two or more
parents. An agent loop with a search tool adjudicates when a generator is
available; otherwise a fixed rule cascade decides. Either way exactly one
path survives and the rest are pruned with reasoning and evidence kept on
the audit trail.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import (
    AlreadyApplied,
    GeneratorFailure,
    ParseFailure,
    ToolFailure,
    UnknownPathLabel,
)
from .taxonomy import TaxonomyTree
from .textutil import normalize_name

# Tier-1 axis precedence used by the dominance rule: mechanism and location
# outrank how a finding presents or is acquired.
AXIS_DOMINANCE = ("disease", "anatomy", "procedure", "drug", "modality", "symptom", "other")

DEFAULT_MAX_STEPS = 3

AGENT_TEMPLATE = """\
You are a rigorous medical knowledge base construction Agent. Your task is to resolve entity classification conflicts.
The current entity "{entity}" is attached to multiple parent nodes:

{paths}

You must search for the exact medical definition via Google/Wiki and adjudicate based on the following principles:
1. Principle of Etiological Dominance: Classification based on pathological mechanism or anatomical location takes precedence over clinical symptoms.
2. Principle of Specificity: If one parent is a subset of another and describes the entity more accurately, prefer the more specific one.

Thinking Steps:

Step 1: Construct query terms and call the search tool for the definition. To call the search tool, output exactly <Search>your query</Search> and stop; the observation will be appended.

Step 2: Analyze results and compare the validity of each parent path.

Step 3: Decide which path to keep and delete the others.

Output Format:
<SearchEvidence>Excerpt from the search results...</SearchEvidence>
<Reasoning>Why the kept path is more appropriate under the principles above.</Reasoning>
<FinalAction>Keep: path_a, Delete: path_b</FinalAction>"""


def path_label(index: int) -> str:
    if index < 0:
        raise ValueError("index must be >= 0")
    letters = ""
    index += 1
    while index:
        index, rem = divmod(index - 1, 26)
        letters = chr(ord("a") + rem) + letters
    return f"path_{letters}"


def _label_index(label: str) -> int:
    m = re.fullmatch(r"path_([a-z]+)", label.strip())
    if m is None:
        raise ParseFailure(f"malformed path label {label!r}")
    value = 0
    for ch in m.group(1):
        value = value * 26 + (ord(ch) - ord("a") + 1)
    return value - 1


@dataclass
class Resolution:
    kept_path: list[str]
    deleted_paths: list[list[str]]
    reasoning: str
    actor: str  # agent | rule | human


@dataclass
class ConflictCase:
    entity_name: str
    candidate_paths: list[list[str]]   # full root->leaf name paths
    leaf_ids: list[int]
    evidence: list[tuple[str, str, str]] = field(default_factory=list)  # (query, snippet, source)
    resolution: Optional[Resolution] = None
    applied: bool = False


@dataclass
class AgentTranscript:
    steps: list[dict] = field(default_factory=list)
    final_action: Optional[str] = None


def detect_conflicts(tree: TaxonomyTree) -> list[ConflictCase]:
    """Group active leaves by normalized name; >= 2 placements is a case.

    Sibling-name uniqueness already forbids same-parent duplicates, so any
    group found here spans distinct parents. Ordering is by node id, which
    fixes the path_a/path_b labeling.
    """
    groups: dict[str, list] = {}
    for node in tree.active_nodes():
        if any(c.active for c in tree.children_of(node.id)):
            continue
        groups.setdefault(normalize_name(node.name), []).append(node)
    cases = []
    for key in sorted(groups):
        nodes = sorted(groups[key], key=lambda n: n.id)
        if len(nodes) < 2:
            continue
        cases.append(
            ConflictCase(
                entity_name=nodes[0].name,
                candidate_paths=[tree.path_of(n.id) for n in nodes],
                leaf_ids=[n.id for n in nodes],
            )
        )
    return cases


def build_agent_prompt(case: ConflictCase) -> str:
    if len(case.candidate_paths) < 2:
        raise ValueError("a conflict case needs at least two candidate paths")
    lines = []
    for i, path in enumerate(case.candidate_paths):
        parent = ".".join(path[:-1]) if len(path) > 1 else "(root)"
        lines.append(f"{i + 1}. Parent Path {path_label(i)[5:].upper()} ({path_label(i)}): {parent}")
    prompt = AGENT_TEMPLATE.replace("{entity}", case.entity_name)
    return prompt.replace("{paths}", "\n".join(lines))


_FINAL = re.compile(r"<FinalAction>(.*?)</FinalAction>", re.DOTALL)
_SEARCH = re.compile(r"<Search>(.*?)</Search>", re.DOTALL)
_EVIDENCE = re.compile(r"<SearchEvidence>(.*?)</SearchEvidence>", re.DOTALL)
_REASONING = re.compile(r"<Reasoning>(.*?)</Reasoning>", re.DOTALL)


def parse_final_action(text: str, num_paths: int) -> tuple[int, list[int]]:
    """Extract (keep index, delete indices) from a final action block.

    The keep label must name one of the case's paths; explicit delete labels
    must be valid and must not include the kept one. Paths the model leaves
    unmentioned are deleted anyway: a resolution keeps exactly one path.
    """
    m = _FINAL.search(text)
    if m is None:
        raise ParseFailure("no <FinalAction> block found")
    body = m.group(1).strip()
    keep_m = re.search(r"Keep\s*:\s*(path_[a-z]+)", body)
    if keep_m is None:
        raise ParseFailure("final action lacks a Keep label")
    keep = _label_index(keep_m.group(1))
    if keep >= num_paths:
        raise UnknownPathLabel(f"{keep_m.group(1)} exceeds the {num_paths} case paths")
    deletes = []
    del_m = re.search(r"Delete\s*:\s*(.+)$", body, re.DOTALL)
    if del_m is not None:
        for token in del_m.group(1).split(","):
            token = token.strip()
            if not token:
                continue
            idx = _label_index(token)
            if idx >= num_paths:
                raise UnknownPathLabel(f"{token} exceeds the {num_paths} case paths")
            if idx == keep:
                raise ParseFailure("kept path also listed for deletion")
            deletes.append(idx)
    # anything unmentioned is deleted too
    full = [i for i in range(num_paths) if i != keep]
    return keep, full


def run_react(
    case: ConflictCase,
    generator,
    search_tool,
    max_steps: int = DEFAULT_MAX_STEPS,
) -> AgentTranscript:
    """Drive the search-then-decide loop until a final action or step cap.

    Observations are appended to the prompt after each tool call. Reaching
    the cap without a final action leaves the case unresolved so the caller
    can fall back to rules.
    """
    transcript = AgentTranscript()
    prompt = build_agent_prompt(case)
    tool_calls = 0
    for _ in range(max_steps + 1):
        try:
            text = generator.generate(prompt)
        except Exception as exc:
            raise GeneratorFailure(f"agent generator failed: {exc}") from exc
        final_m = _FINAL.search(text)
        if final_m is not None:
            keep, deletes = parse_final_action(text, len(case.candidate_paths))
            evid_m = _EVIDENCE.search(text)
            reason_m = _REASONING.search(text)
            reasoning = reason_m.group(1).strip() if reason_m else ""
            if evid_m is not None and evid_m.group(1).strip():
                case.evidence.append(("", evid_m.group(1).strip(), "agent"))
            case.resolution = Resolution(
                kept_path=case.candidate_paths[keep],
                deleted_paths=[case.candidate_paths[i] for i in deletes],
                reasoning=reasoning,
                actor="agent",
            )
            transcript.steps.append({"response": text})
            transcript.final_action = final_m.group(1).strip()
            return transcript
        search_m = _SEARCH.search(text)
        if search_m is None:
            transcript.steps.append({"response": text, "note": "unparseable"})
            return transcript
        if tool_calls >= max_steps:
            transcript.steps.append({"response": text, "note": "step cap reached"})
            return transcript
        query = search_m.group(1).strip()
        try:
            results = search_tool.search(query)
        except ToolFailure:
            raise
        except Exception as exc:
            raise ToolFailure(f"search tool failed: {exc}") from exc
        tool_calls += 1
        for r in results:
            case.evidence.append((query, r.snippet, r.source))
        observation = "\n".join(f"[{r.source}] {r.snippet}" for r in results) or "(no results)"
        transcript.steps.append({"response": text, "query": query, "observation": observation})
        prompt = prompt + f"\n<Search>{query}</Search>\n<Observation>{observation}</Observation>\n"
    return transcript


def _ancestor_ids(tree: TaxonomyTree, node_id: int) -> set[int]:
    out = set()
    current = tree.node(node_id).parent_id
    while current is not None:
        out.add(current)
        current = tree.node(current).parent_id
    return out


def rule_fallback(case: ConflictCase, tree: TaxonomyTree) -> Resolution:
    """Deterministic cascade: specificity, axis dominance, parent frequency.

    Specificity drops any candidate whose parent is a strict ancestor of
    another candidate's parent. Dominance compares tier-1 axes in
    AXIS_DOMINANCE order. Remaining ties go to the highest parent frequency,
    then the lexicographically smallest path.
    """
    survivors = list(range(len(case.leaf_ids)))

    parents = [tree.node(leaf).parent_id for leaf in case.leaf_ids]
    ancestors = {
        i: (_ancestor_ids(tree, parents[i]) if parents[i] is not None else set())
        for i in survivors
    }
    dominated = set()
    for i in survivors:
        for j in survivors:
            if i == j or parents[i] is None or parents[j] is None:
                continue
            if parents[i] in ancestors[j]:
                dominated.add(i)  # i's parent is an ancestor of j's: j is more specific
    specific = [i for i in survivors if i not in dominated]
    rule = None
    if len(specific) == 1:
        rule = "specificity"
        survivors = specific
    else:
        if specific:
            survivors = specific

        def tier1_axis(index: int) -> str:
            node = tree.node(case.leaf_ids[index])
            while node.parent_id is not None:
                node = tree.node(node.parent_id)
            return node.axis

        ranks = {i: AXIS_DOMINANCE.index(tier1_axis(i)) for i in survivors}
        best = min(ranks.values())
        dominant = [i for i in survivors if ranks[i] == best]
        if len(dominant) == 1:
            rule = "etiological dominance"
            survivors = dominant
        else:
            survivors = dominant

            def parent_freq(index: int) -> int:
                pid = parents[index]
                return tree.node(pid).frequency if pid is not None else 0

            top = max(parent_freq(i) for i in survivors)
            frequent = [i for i in survivors if parent_freq(i) == top]
            rule = "parent frequency"
            if len(frequent) > 1:
                frequent.sort(key=lambda i: ".".join(case.candidate_paths[i]))
                rule = "parent frequency, lexicographic tie-break"
            survivors = [frequent[0]]

    keep = survivors[0]
    kept_path = case.candidate_paths[keep]
    return Resolution(
        kept_path=kept_path,
        deleted_paths=[p for i, p in enumerate(case.candidate_paths) if i != keep],
        reasoning=f"rule fallback ({rule}): kept {'.'.join(kept_path)}",
        actor="rule",
    )


def apply_resolution(tree: TaxonomyTree, case: ConflictCase) -> int:
    """Prune every deleted path's leaf subtree; returns pruned node count."""
    if case.resolution is None:
        raise ValueError("case has no resolution to apply")
    if case.applied:
        raise AlreadyApplied(f"conflict over {case.entity_name!r} was already applied")
    resolution = case.resolution
    evidence = [f"{q} | {snippet} | {source}" for q, snippet, source in case.evidence]
    pruned = 0
    keep_index = case.candidate_paths.index(resolution.kept_path)
    for index, leaf_id in enumerate(case.leaf_ids):
        if index == keep_index:
            continue
        if not tree.node(leaf_id).active:
            continue
        pruned += tree.prune_subtree(
            leaf_id,
            reasoning=resolution.reasoning,
            actor=resolution.actor,
            evidence=evidence,
            operation="resolve",
        )
    case.applied = True
    return pruned


def resolve_case(
    case: ConflictCase,
    tree: TaxonomyTree,
    generator=None,
    search_tool=None,
    max_steps: int = DEFAULT_MAX_STEPS,
) -> Resolution:
    """Agent adjudication when backends are available, rules otherwise.

    Any agent-side failure (generator error, tool error, unparseable or
    missing final action) falls back to the rule cascade rather than
    leaving the conflict open.
    """
    if generator is not None and search_tool is not None:
        try:
            run_react(case, generator, search_tool, max_steps=max_steps)
        except (GeneratorFailure, ToolFailure, ParseFailure, UnknownPathLabel):
            case.resolution = None
    if case.resolution is None:
        case.resolution = rule_fallback(case, tree)
    return case.resolution


def resolve_all(
    tree: TaxonomyTree,
    generator=None,
    search_tool=None,
    max_steps: int = DEFAULT_MAX_STEPS,
    log_path: Optional[str | Path] = None,
) -> list[ConflictCase]:
    """Detect, resolve and apply until no conflicts remain (a fixpoint).

    Applying one resolution cannot create a new duplicate name, but pruning
    can expose new leaves, so detection reruns until clean. Each resolved
    case is appended to the JSONL log with evidence and reasoning.
    """
    handled: list[ConflictCase] = []
    log_records = []
    for _ in range(1000):
        cases = detect_conflicts(tree)
        if not cases:
            break
        for case in cases:
            resolve_case(case, tree, generator, search_tool, max_steps)
            apply_resolution(tree, case)
            handled.append(case)
            log_records.append(
                {
                    "entity": case.entity_name,
                    "kept": ".".join(case.resolution.kept_path),
                    "deleted": [".".join(p) for p in case.resolution.deleted_paths],
                    "actor": case.resolution.actor,
                    "reasoning": case.resolution.reasoning,
                    "evidence": [list(e) for e in case.evidence],
                }
            )
    else:
        raise RuntimeError("conflict resolution did not reach a fixpoint")
    if log_path is not None:
        with open(log_path, "a", encoding="utf-8") as fh:
            for record in log_records:
                fh.write(json.dumps(record, ensure_ascii=False) + "\n")
    return handled
