"""Multi-pattern lexical scanning over document corpora.

The automaton is a hand-built Aho-Corasick: trie plus BFS failure links
with merged output sets, so a single left-to-right pass reports every
dictionary hit. Matching runs over NFC+casefold normalized text; an offset
map carries each normalized position back to the original string, which
keeps the reported span arithmetic exact even when casefolding changes
string length.
"""

from __future__ import annotations

import json
import math
import unicodedata
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Optional

from .errors import EmptyDictionary
from .textutil import normalize_name


def normalize_for_match(text: str) -> tuple[str, Optional[list[int]], Optional[list[int]]]:
    """NFC + casefold with per-cluster offset arrays.

    Returns (normalized, starts, ends) where starts[i]/ends[i] bound the
    original-text span that produced normalized char i. ASCII text takes a
    fast path with identity offsets (starts/ends both None).
    """
    if text.isascii():
        return text.lower(), None, None
    chars: list[str] = []
    starts: list[int] = []
    ends: list[int] = []
    i, n = 0, len(text)
    while i < n:
        j = i + 1
        while j < n and unicodedata.combining(text[j]):
            j += 1
        cluster = unicodedata.normalize("NFC", text[i:j]).casefold()
        for ch in cluster:
            chars.append(ch)
            starts.append(i)
            ends.append(j)
        i = j
    return "".join(chars), starts, ends


class PatternDictionary:
    """Surfaces to scan for, each tied to one or more taxonomy node ids.

    Surfaces that collide after normalization merge their node-id sets, so
    one automaton pattern can credit several nodes.
    """

    def __init__(self) -> None:
        self.surfaces: list[str] = []          # normalized, insertion order
        self.node_ids: list[set[int]] = []
        self.display: list[str] = []           # first original surface seen
        self.node_tiers: dict[int, int] = {}
        self._index: dict[str, int] = {}

    def add(self, surface: str, node_id: int, tier: Optional[int] = None) -> None:
        norm = normalize_for_match(surface)[0]
        if not norm.strip():
            raise ValueError(f"surface {surface!r} is empty after normalization")
        norm = norm.strip()
        idx = self._index.get(norm)
        if idx is None:
            idx = len(self.surfaces)
            self._index[norm] = idx
            self.surfaces.append(norm)
            self.node_ids.append(set())
            self.display.append(surface)
        self.node_ids[idx].add(node_id)
        if tier is not None:
            self.node_tiers[node_id] = tier

    def __len__(self) -> int:
        return len(self.surfaces)

    @classmethod
    def from_tree(cls, tree, tiers: tuple[int, ...] = (5,)) -> "PatternDictionary":
        d = cls()
        for node in tree.active_nodes():
            if node.tier in tiers:
                d.add(node.name, node.id, tier=node.tier)
        return d

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "PatternDictionary":
        d = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                d.add(rec["surface"], int(rec["node_id"]), rec.get("tier"))
        return d

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for idx, norm in enumerate(self.surfaces):
                for node_id in sorted(self.node_ids[idx]):
                    rec = {"surface": self.display[idx], "node_id": node_id}
                    if node_id in self.node_tiers:
                        rec["tier"] = self.node_tiers[node_id]
                    fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


DENSE_DEPTH = 2


class Automaton:
    """Compiled matching automaton.

    States near the root are visited on almost every input character, so
    transitions for depths <= DENSE_DEPTH are pre-resolved into complete
    per-state maps; deeper states keep sparse goto dicts walked through
    failure links.
    """

    def __init__(self) -> None:
        self.goto: list[dict[str, int]] = [{}]
        self.fail: list[int] = [0]
        self.out: list[tuple[int, ...]] = [()]
        self.depth: list[int] = [0]
        self.pattern_lengths: list[int] = []
        self.pattern_nodes: list[tuple[int, ...]] = []
        self.pattern_surfaces: list[str] = []
        self.node_tiers: dict[int, int] = {}
        self.dense: dict[int, dict[str, int]] = {}

    @property
    def state_count(self) -> int:
        return len(self.goto)

    @classmethod
    def build(cls, dictionary: PatternDictionary) -> "Automaton":
        if len(dictionary) == 0:
            raise EmptyDictionary("cannot build an automaton from zero patterns")
        auto = cls()
        auto.node_tiers = dict(dictionary.node_tiers)
        outputs: list[list[int]] = [[]]

        for pid, surface in enumerate(dictionary.surfaces):
            auto.pattern_lengths.append(len(surface))
            auto.pattern_nodes.append(tuple(sorted(dictionary.node_ids[pid])))
            auto.pattern_surfaces.append(surface)
            state = 0
            for ch in surface:
                nxt = auto.goto[state].get(ch)
                if nxt is None:
                    nxt = len(auto.goto)
                    auto.goto[state][ch] = nxt
                    auto.goto.append({})
                    auto.fail.append(0)
                    auto.depth.append(auto.depth[state] + 1)
                    outputs.append([])
                state = nxt
            outputs[state].append(pid)

        # BFS failure links; outputs of the failure target are merged in so
        # every state reports all patterns ending at its position.
        queue: deque[int] = deque()
        for state in auto.goto[0].values():
            auto.fail[state] = 0
            queue.append(state)
        while queue:
            state = queue.popleft()
            for ch, nxt in auto.goto[state].items():
                queue.append(nxt)
                f = auto.fail[state]
                while f and ch not in auto.goto[f]:
                    f = auto.fail[f]
                auto.fail[nxt] = auto.goto[f].get(ch, 0)
                if auto.fail[nxt] == nxt:
                    auto.fail[nxt] = 0
                outputs[nxt].extend(outputs[auto.fail[nxt]])
        auto.out = [tuple(o) for o in outputs]

        alphabet = set()
        for table in auto.goto:
            alphabet.update(table)
        for state in range(auto.state_count):
            if auto.depth[state] > DENSE_DEPTH:
                continue
            resolved = {}
            for ch in alphabet:
                s = state
                while True:
                    nxt = auto.goto[s].get(ch)
                    if nxt is not None:
                        resolved[ch] = nxt
                        break
                    if s == 0:
                        resolved[ch] = 0
                        break
                    s = auto.fail[s]
            auto.dense[state] = resolved
        return auto


class Match(NamedTuple):
    pattern_id: int
    start: int        # normalized-text offsets; end - start == pattern length
    end: int
    orig_start: int
    orig_end: int
    node_ids: tuple[int, ...]


@dataclass
class MatchReport:
    doc_id: str
    matches: list[Match]
    distinct_node_ids: list[int]
    tier_histogram: dict[int, int]
    scan_bytes: int
    longest_only: bool = False

    def to_json(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "matches": [
                {
                    "pattern_id": m.pattern_id,
                    "start": m.start,
                    "end": m.end,
                    "orig_start": m.orig_start,
                    "orig_end": m.orig_end,
                    "node_ids": list(m.node_ids),
                }
                for m in self.matches
            ],
            "distinct_node_ids": self.distinct_node_ids,
            "tier_histogram": {str(k): v for k, v in sorted(self.tier_histogram.items())},
            "scan_bytes": self.scan_bytes,
            "longest_only": self.longest_only,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MatchReport":
        return cls(
            doc_id=obj.get("doc_id", ""),
            matches=[
                Match(
                    m["pattern_id"], m["start"], m["end"],
                    m["orig_start"], m["orig_end"], tuple(m.get("node_ids", ())),
                )
                for m in obj.get("matches", [])
            ],
            distinct_node_ids=list(obj.get("distinct_node_ids", [])),
            tier_histogram={int(k): v for k, v in obj.get("tier_histogram", {}).items()},
            scan_bytes=int(obj.get("scan_bytes", 0)),
            longest_only=bool(obj.get("longest_only", False)),
        )


def _boundary_ok(text: str, start: int, end: int) -> bool:
    if start > 0 and text[start - 1].isalnum():
        return False
    if end < len(text) and text[end].isalnum():
        return False
    return True


def scan(
    automaton: Automaton,
    text: str,
    doc_id: str = "",
    longest_only: bool = False,
    boundaries: bool = False,
) -> MatchReport:
    """Single pass over one document; reports every overlap unless filtered.

    longest_only keeps, per start offset, only the longest match there.
    boundaries drops matches flanked by alphanumeric characters.
    """
    norm, starts, ends = normalize_for_match(text)
    goto, fail, out, dense = automaton.goto, automaton.fail, automaton.out, automaton.dense
    lengths = automaton.pattern_lengths

    raw: list[tuple[int, int, int]] = []  # (start, end, pattern_id), normalized coords
    state = 0
    for pos, ch in enumerate(norm):
        table = dense.get(state)
        if table is not None:
            state = table.get(ch, 0)
        else:
            while True:
                nxt = goto[state].get(ch)
                if nxt is not None:
                    state = nxt
                    break
                if state == 0:
                    break
                state = fail[state]
        if out[state]:
            end = pos + 1
            for pid in out[state]:
                raw.append((end - lengths[pid], end, pid))

    if boundaries:
        raw = [m for m in raw if _boundary_ok(norm, m[0], m[1])]
    if longest_only:
        best: dict[int, tuple[int, int, int]] = {}
        for m in raw:
            cur = best.get(m[0])
            if cur is None or m[1] > cur[1]:
                best[m[0]] = m
        raw = list(best.values())
    raw.sort()

    matches = []
    for start, end, pid in raw:
        nodes = automaton.pattern_nodes[pid]
        if starts is None:
            matches.append(Match(pid, start, end, start, end, nodes))
        else:
            matches.append(Match(pid, start, end, starts[start], ends[end - 1], nodes))

    node_ids: set[int] = set()
    for m in matches:
        node_ids.update(m.node_ids)
    histogram: dict[int, int] = {}
    for node_id in node_ids:
        tier = automaton.node_tiers.get(node_id)
        if tier is not None:
            histogram[tier] = histogram.get(tier, 0) + 1

    return MatchReport(
        doc_id=doc_id,
        matches=matches,
        distinct_node_ids=sorted(node_ids),
        tier_histogram=histogram,
        scan_bytes=len(text.encode("utf-8")),
        longest_only=longest_only,
    )


@dataclass
class CorpusStats:
    docs: int = 0
    skipped: int = 0
    total_matches: int = 0
    entity_doc_freq: dict[int, int] = field(default_factory=dict)
    dictionary_nodes: int = 0

    def merge(self, other: "CorpusStats") -> "CorpusStats":
        if self.dictionary_nodes and other.dictionary_nodes:
            if self.dictionary_nodes != other.dictionary_nodes:
                raise ValueError("cannot merge stats from different dictionaries")
        self.dictionary_nodes = self.dictionary_nodes or other.dictionary_nodes
        self.docs += other.docs
        self.skipped += other.skipped
        self.total_matches += other.total_matches
        for node_id, df in other.entity_doc_freq.items():
            self.entity_doc_freq[node_id] = self.entity_doc_freq.get(node_id, 0) + df
        return self

    @property
    def coverage_fraction(self) -> float:
        if self.dictionary_nodes == 0:
            return 0.0
        return len(self.entity_doc_freq) / self.dictionary_nodes

    def to_json(self) -> dict:
        return {
            "docs": self.docs,
            "skipped": self.skipped,
            "total_matches": self.total_matches,
            "entity_doc_freq": {str(k): v for k, v in sorted(self.entity_doc_freq.items())},
            "dictionary_nodes": self.dictionary_nodes,
            "coverage_fraction": self.coverage_fraction,
        }


def _dictionary_node_count(automaton: Automaton) -> int:
    nodes: set[int] = set()
    for tup in automaton.pattern_nodes:
        nodes.update(tup)
    return len(nodes)


def scan_corpus(
    automaton: Automaton,
    corpus: Iterable,
    on_report: Optional[Callable[[MatchReport], None]] = None,
    longest_only: bool = False,
    boundaries: bool = False,
) -> CorpusStats:
    """Scan a stream of {"id", "text"} records, skipping malformed ones.

    Per-document reports go to `on_report` as they are produced; the
    aggregate statistics are returned at the end. Folding stats over corpus
    shards with CorpusStats.merge gives the same result as one big scan.
    """
    stats = CorpusStats(dictionary_nodes=_dictionary_node_count(automaton))
    for record in corpus:
        if not isinstance(record, dict) or "text" not in record:
            stats.skipped += 1
            continue
        try:
            text = str(record["text"])
            report = scan(
                automaton,
                text,
                doc_id=str(record.get("id", "")),
                longest_only=longest_only,
                boundaries=boundaries,
            )
        except Exception:
            stats.skipped += 1
            continue
        stats.docs += 1
        stats.total_matches += len(report.matches)
        for node_id in report.distinct_node_ids:
            stats.entity_doc_freq[node_id] = stats.entity_doc_freq.get(node_id, 0) + 1
        if on_report is not None:
            on_report(report)
    return stats


def representative_entities(
    report: MatchReport, stats: CorpusStats, k: int
) -> list[tuple[int, float]]:
    """Rank a document's matched entities by in-doc count damped by corpus
    document frequency: count * ln(docs / (1 + df)). Ubiquitous entities
    rank below equally frequent rare ones."""
    if k < 1:
        raise ValueError("k must be >= 1")
    counts: dict[int, int] = {}
    for m in report.matches:
        for node_id in m.node_ids:
            counts[node_id] = counts.get(node_id, 0) + 1
    scored = []
    for node_id, count in counts.items():
        df = stats.entity_doc_freq.get(node_id, 0)
        score = count * math.log(stats.docs / (1 + df)) if stats.docs > 0 else 0.0
        scored.append((node_id, score))
    scored.sort(key=lambda item: (-item[1], item[0]))
    return scored[:k]
