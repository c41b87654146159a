"""Staged entity extraction: batch chunking, prompt assembly, response parsing,
frequency accounting and threshold cleansing.

Stage 1 pulls flat entity mentions out of sentence batches; Stage 2 extracts
(type, name) pairs. Both stages speak strict JSON keyed by `SentenceK`, with
"None" as the explicit empty marker, so a single provider call covers a whole
batch of sentences instead of one call per sentence.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

from .errors import EmptyCorpus, ParseFailure
from .textutil import normalize_name, split_sentences

DEFAULT_BATCH_SIZE = 30
DEFAULT_MIN_ENTITY_FREQ = 10
DEFAULT_MIN_TYPE_SIZE = 5
MAX_PARSE_RETRIES = 2

_SENTENCE_KEY = re.compile(r"^Sentence(\d+)$")

STAGE1_TEMPLATE = """\
Below are several sentences. Analyze them for medical entity nouns and output according to the following requirements:
1. Determine if it is a medical entity; if not, do not output.
2. Separate entity nouns with commas; do not include duplicates.
3. If there are no medical-related entity nouns, output "None".
4. Output strictly in JSON format. The example format is as follows:
{"Sentence0": "Entity1,Entity2,...", "Sentence1": "Entity1,Entity2,...", ...}
Sentences:
{lines}"""

STAGE2_TEMPLATE = """\
Below are several sentences. Analyze these sentences for medical entity nouns and their types, and output according to the following requirements:
1. Entity nouns must be informative proper nouns. Secondarily, determine if they are medical entities; if not, do not output.
2. Pay attention to overly long medical entity nouns and determine if they can be segmented/split.
3. The sentences below may contain special symbols and meaningless spaces; please ignore them directly.
4. Replace <EntityType> with the specific entity category.
5. Replace <EntityName> with the specific entity noun.
6. Output strictly in JSON format. The example format is as follows:
{"Sentence0": ["<EntityType>:<EntityName>", ...], "Sentence1": [...], ...}
Sentences:
{lines}"""


@dataclass
class SentenceBatch:
    doc_id: str
    sentences: list[str]
    batch_index: int


@dataclass
class RawMention:
    doc_id: str
    sentence_index: int
    entity_name: str
    entity_type: Optional[str] = None


def chunk_corpus(corpus: Iterable[dict], batch_size: int) -> Iterator[SentenceBatch]:
    """Chunk documents into sentence batches that preserve sentence order.

    Batches never span documents. Documents are dicts carrying "id" and
    either "text" (segmented here) or pre-segmented "sentences". All batches
    are full except possibly the last one of each document.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    yielded = False
    for doc in corpus:
        doc_id = str(doc.get("id", ""))
        if "sentences" in doc:
            sentences = [s.strip() for s in doc["sentences"] if s and s.strip()]
        else:
            sentences = split_sentences(doc.get("text", ""))
        for batch_index, start in enumerate(range(0, len(sentences), batch_size)):
            yield SentenceBatch(doc_id, sentences[start : start + batch_size], batch_index)
            yielded = True
    if not yielded:
        raise EmptyCorpus("corpus contains no sentences")


def _render_lines(sentences: list[str]) -> str:
    # Braces in sentence text are doubled so the template's substitution
    # markers stay unambiguous.
    out = []
    for i, sent in enumerate(sentences):
        out.append(f"Sentence{i}: " + sent.replace("{", "{{").replace("}", "}}"))
    return "\n".join(out)


def build_stage1_prompt(batch: SentenceBatch) -> str:
    if not batch.sentences:
        raise ValueError("batch must contain at least one sentence")
    return STAGE1_TEMPLATE.replace("{lines}", _render_lines(batch.sentences))


def build_stage2_prompt(batch: SentenceBatch) -> str:
    if not batch.sentences:
        raise ValueError("batch must contain at least one sentence")
    return STAGE2_TEMPLATE.replace("{lines}", _render_lines(batch.sentences))


def _load_keyed_json(text: str, batch: Optional[SentenceBatch]) -> dict[int, object]:
    try:
        obj = json.loads(text)
    except ValueError as exc:
        raise ParseFailure(f"response is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ParseFailure("response must be a JSON object")
    keyed: dict[int, object] = {}
    for key, value in obj.items():
        m = _SENTENCE_KEY.match(key)
        if m is None:
            raise ParseFailure(f"unknown key {key!r}")
        idx = int(m.group(1))
        if batch is not None and idx >= len(batch.sentences):
            raise ParseFailure(f"key {key!r} beyond batch of {len(batch.sentences)}")
        keyed[idx] = value
    return keyed


def parse_stage1_response(text: str, batch: Optional[SentenceBatch] = None) -> list[RawMention]:
    """Parse a flat-extraction response into mentions.

    "None" values yield no mentions; comma-separated names are split,
    trimmed and deduplicated per sentence (first surface form wins).
    Missing sentence keys are treated as empty.
    """
    keyed = _load_keyed_json(text, batch)
    doc_id = batch.doc_id if batch is not None else ""
    mentions: list[RawMention] = []
    for idx in sorted(keyed):
        value = keyed[idx]
        if not isinstance(value, str):
            raise ParseFailure(f"Sentence{idx} value must be a string")
        if value.strip() == "None":
            continue
        seen: set[str] = set()
        for raw in value.split(","):
            name = raw.strip()
            if not name:
                continue
            key = normalize_name(name)
            if key in seen:
                continue
            seen.add(key)
            mentions.append(RawMention(doc_id, idx, name))
    return mentions


def parse_stage2_response(
    text: str, batch: Optional[SentenceBatch] = None
) -> tuple[list[RawMention], int]:
    """Parse a typed-extraction response; returns (mentions, warning count).

    Each array element splits at the FIRST colon into type and name; elements
    without a separator (or with an empty side) are dropped and counted as
    warnings rather than failing the batch.
    """
    keyed = _load_keyed_json(text, batch)
    doc_id = batch.doc_id if batch is not None else ""
    mentions: list[RawMention] = []
    warnings = 0
    for idx in sorted(keyed):
        value = keyed[idx]
        if isinstance(value, str) and value.strip() == "None":
            continue
        if not isinstance(value, list):
            raise ParseFailure(f"Sentence{idx} value must be an array")
        seen: set[tuple[str, str]] = set()
        for element in value:
            if not isinstance(element, str) or ":" not in element:
                warnings += 1
                continue
            etype, _, name = element.partition(":")
            etype, name = etype.strip(), name.strip()
            if not etype or not name:
                warnings += 1
                continue
            key = (normalize_name(etype), normalize_name(name))
            if key in seen:
                continue
            seen.add(key)
            mentions.append(RawMention(doc_id, idx, name, entity_type=etype))
    return mentions, warnings


class FrequencyTable:
    """Entity occurrence counts plus type membership.

    Counts are keyed by normalized names; the most frequent original surface
    form of each name is retained for display. Partial tables produced by
    parallel workers merge associatively.
    """

    def __init__(self) -> None:
        self.entity_counts: dict[str, int] = {}
        self.type_members: dict[str, set[str]] = {}
        self._surfaces: dict[str, Counter] = {}
        self._type_surfaces: dict[str, Counter] = {}

    def add_mention(self, mention: RawMention) -> None:
        key = normalize_name(mention.entity_name)
        if not key:
            return
        self.entity_counts[key] = self.entity_counts.get(key, 0) + 1
        self._surfaces.setdefault(key, Counter())[mention.entity_name] += 1
        if mention.entity_type:
            tkey = normalize_name(mention.entity_type)
            self.type_members.setdefault(tkey, set()).add(key)
            self._type_surfaces.setdefault(tkey, Counter())[mention.entity_type] += 1

    def merge(self, other: "FrequencyTable") -> "FrequencyTable":
        for key, count in other.entity_counts.items():
            self.entity_counts[key] = self.entity_counts.get(key, 0) + count
        for key, counter in other._surfaces.items():
            self._surfaces.setdefault(key, Counter()).update(counter)
        for tkey, members in other.type_members.items():
            self.type_members.setdefault(tkey, set()).update(members)
        for tkey, counter in other._type_surfaces.items():
            self._type_surfaces.setdefault(tkey, Counter()).update(counter)
        return self

    def display_name(self, key: str) -> str:
        counter = self._surfaces.get(key)
        if not counter:
            counter = self._type_surfaces.get(key)
        if not counter:
            return key
        # highest count wins; ties resolved by lexicographic surface for determinism
        return min(counter.items(), key=lambda kv: (-kv[1], kv[0]))[0]

    def cleanse(
        self,
        min_entity_freq: int = DEFAULT_MIN_ENTITY_FREQ,
        min_type_size: int = DEFAULT_MIN_TYPE_SIZE,
    ) -> "FrequencyTable":
        """Drop rare entities first, then undersized types.

        Type member sets are filtered down to surviving entities, which makes
        the operation idempotent. Entities left without a type survive in the
        count table (they simply take no part in hierarchy building).
        """
        if min_entity_freq < 1 or min_type_size < 1:
            raise ValueError("cleansing thresholds must be >= 1")
        out = FrequencyTable()
        kept = {k for k, c in self.entity_counts.items() if c >= min_entity_freq}
        out.entity_counts = {k: self.entity_counts[k] for k in kept}
        out._surfaces = {k: Counter(self._surfaces[k]) for k in kept if k in self._surfaces}
        for tkey, members in self.type_members.items():
            surviving = members & kept
            if len(surviving) >= min_type_size:
                out.type_members[tkey] = set(surviving)
                if tkey in self._type_surfaces:
                    out._type_surfaces[tkey] = Counter(self._type_surfaces[tkey])
        return out

    # ------------------------------------------------------------- persistence

    def to_json(self) -> dict:
        return {
            "entity_counts": dict(sorted(self.entity_counts.items())),
            "type_members": {k: sorted(v) for k, v in sorted(self.type_members.items())},
            "surfaces": {k: dict(sorted(c.items())) for k, c in sorted(self._surfaces.items())},
            "type_surfaces": {
                k: dict(sorted(c.items())) for k, c in sorted(self._type_surfaces.items())
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FrequencyTable":
        table = cls()
        table.entity_counts = {k: int(v) for k, v in obj.get("entity_counts", {}).items()}
        table.type_members = {k: set(v) for k, v in obj.get("type_members", {}).items()}
        table._surfaces = {k: Counter(v) for k, v in obj.get("surfaces", {}).items()}
        table._type_surfaces = {k: Counter(v) for k, v in obj.get("type_surfaces", {}).items()}
        return table


@dataclass
class ExtractionStats:
    batches: int = 0
    provider_calls: int = 0
    mentions: int = 0
    warnings: int = 0
    quarantined: int = 0
    quarantine: list[dict] = field(default_factory=list)


def extract_corpus(
    corpus: Iterable[dict],
    provider,
    stage: int = 1,
    batch_size: int = DEFAULT_BATCH_SIZE,
    max_workers: int = 1,
) -> tuple[FrequencyTable, ExtractionStats]:
    """Run one extraction stage over a corpus and merge the frequency tables.

    A batch whose response fails to parse is retried up to MAX_PARSE_RETRIES
    times and then quarantined (recorded in the stats, never aborting the
    run). Batches are independent, so `max_workers` > 1 fans them out over a
    thread pool and merges the per-worker tables associatively.
    """
    if stage not in (1, 2):
        raise ValueError("stage must be 1 or 2")
    build = build_stage1_prompt if stage == 1 else build_stage2_prompt
    stats = ExtractionStats()

    def process(batch: SentenceBatch) -> tuple[FrequencyTable, int, int, int, Optional[dict]]:
        prompt = build(batch)
        table = FrequencyTable()
        calls = 0
        last_error = ""
        for _ in range(1 + MAX_PARSE_RETRIES):
            calls += 1
            text = provider.generate(prompt)
            warnings = 0
            try:
                if stage == 1:
                    mentions = parse_stage1_response(text, batch)
                else:
                    mentions, warnings = parse_stage2_response(text, batch)
            except ParseFailure as exc:
                last_error = str(exc)
                continue
            for mention in mentions:
                table.add_mention(mention)
            return table, calls, len(mentions), warnings, None
        return table, calls, 0, 0, {
            "doc_id": batch.doc_id,
            "batch_index": batch.batch_index,
            "sentences": batch.sentences,
            "error": last_error,
        }

    total = FrequencyTable()
    batches = list(chunk_corpus(corpus, batch_size))
    stats.batches = len(batches)
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(process, batches))
    else:
        results = [process(b) for b in batches]
    for table, calls, mentions_n, warnings_n, quarantined in results:
        total.merge(table)
        stats.provider_calls += calls
        stats.mentions += mentions_n
        stats.warnings += warnings_n
        if quarantined is not None:
            stats.quarantined += 1
            stats.quarantine.append(quarantined)
    return total, stats
