"""Dual-track sample synthesis from scan reports and taxonomy context.

Track 1 rewrites noisy alt-text into an enriched caption grounded in the
linked taxonomy entities. Track 2 walks inference chains across axes
(disease, anatomy, symptom, modality) and asks for strict-JSON VQA items.
Validation never mutates a sample; failures carry machine-readable causes
and are exported to a sidecar, keeping the main JSONL clean.
"""

from __future__ import annotations

import json
import re
import zlib
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Optional, Sequence

from .errors import MissingField, NoLinkedEntities, ParseFailure
from .matcher import MatchReport
from .taxonomy import TaxonomyTree

AXIS_PRIORITY = ("disease", "anatomy", "symptom", "modality")
DEFAULT_MAX_CHAINS = 4
MIN_CAPTION_WORDS = 40
QUESTION_TYPES = ("MCQ", "Interpretation")
MCQ_PREFIXES = ("A)", "B)", "C)", "D)")
INTERPRETATION_ANSWERS = ("True", "False", "Yes", "No")

TRACK1_TEMPLATE = """\
You are an AI expert in medical imaging analysis and contextual captioning. Your task is to perform "Contextual Re-Captioning".

You will be given:
1. A medical image.
2. An original_caption (like a noisy or sparse Alt Text from the web).
3. A set of hierarchically linked medical entities relevant to the image.

Your goal is to synthesize these inputs into a single, enriched, and contextualized caption.

Instructions:
1. First, analyze the visual evidence in the medical image.
2. Review the original_caption to understand its starting point, even if it is noisy or sparse.
3. Your main task is to fuse the original_caption with the linked_entities and your visual analysis.
4. Inject the precise medical terminology from the linked_entities into a new, comprehensive description.
5. Use the hierarchical context of the entities to create a more structured and informative description. For example, if one entity is a disease and another is a radiological sign, explain that the sign is a feature of the disease.
6. The final caption must be objective, fact-based, and grounded in the visual evidence.

Output requirements:
1. Write in English.
2. Produce a single, detailed, and coherent paragraph.
3. The output should be the final enriched caption ONLY.

original_caption: {original_caption}
linked_entities: {entities}"""

TRACK2_TEMPLATE = """\
You are a medical education expert. You will be given a knowledge path drawn from a medical entity taxonomy, linking entities across axes such as disease, anatomy, symptom and modality.

Knowledge path:
{inference_chain}

STEP 1: Identify the clinical relationship the path expresses (for example, a disease affecting an anatomical site, visible through a sign, imaged by a modality).

STEP 2: Write one question that requires reasoning along the path, not mere recall of a single node.

STEP 3: Output strictly one JSON object in exactly this format, with no extra text:
{"target_knowledge_path": "<the path you reasoned over>", "question_type": "<MCQ or Interpretation>", "vqa_data": {"question": "<the question>", "options": ["A) ...", "B) ...", "C) ...", "D) ..."], "correct_answer": "<letter or True/False/Yes/No>", "explanation": "<why, citing the path entities>"}}

For MCQ use exactly four options labeled A) B) C) D) and a single letter correct_answer. For Interpretation omit the options field entirely and answer True, False, Yes or No.
Requested question_type: {question_type}"""


@dataclass
class ChainStep:
    node_id: int
    axis: str
    name: str


@dataclass
class InferenceChain:
    steps: list[ChainStep]
    source_record: str

    def render(self) -> str:
        return " -> ".join(f"{s.name} ({s.axis})" for s in self.steps)

    def entity_names(self) -> list[str]:
        return [s.name for s in self.steps]


@dataclass
class Validation:
    passed: bool
    causes: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"passed": self.passed, "causes": self.causes}


@dataclass
class RecaptionSample:
    image_ref: str
    original_caption: str
    linked_entity_paths: list[str]
    linked_entities: list[tuple[str, str]]  # (surface, axis)
    generated_caption: str = ""
    validation: Optional[Validation] = None

    def to_json(self) -> dict:
        return {
            "image_ref": self.image_ref,
            "original_caption": self.original_caption,
            "linked_entity_paths": self.linked_entity_paths,
            "linked_entities": [list(e) for e in self.linked_entities],
            "generated_caption": self.generated_caption,
            "validation": self.validation.to_json() if self.validation else None,
        }


@dataclass
class ReasoningSample:
    target_knowledge_path: str
    question_type: str
    question: str
    options: Optional[list[str]]
    correct_answer: str
    explanation: str
    validation: Optional[Validation] = None

    def to_json(self) -> dict:
        vqa: dict = {"question": self.question}
        if self.options is not None:
            vqa["options"] = self.options
        vqa["correct_answer"] = self.correct_answer
        vqa["explanation"] = self.explanation
        return {
            "target_knowledge_path": self.target_knowledge_path,
            "question_type": self.question_type,
            "vqa_data": vqa,
        }


def extract_chains(
    report: MatchReport,
    tree: TaxonomyTree,
    max_chains: int = DEFAULT_MAX_CHAINS,
    axis_priority: Sequence[str] = AXIS_PRIORITY,
) -> list[InferenceChain]:
    """Cross entity groups per axis into reasoning chains.

    Matched entities are bucketed by axis; the cross product over the axes
    present (in priority order) yields chains, capped at max_chains in
    product order. A report whose matches cover a single entity still
    yields one single-step chain. Requires longest-only match reports so a
    substring and its superstring never both enter a chain.
    """
    if max_chains < 1:
        raise ValueError("max_chains must be >= 1")
    if not report.longest_only:
        raise ValueError("chain extraction requires a longest-only match report")
    buckets: dict[str, list[ChainStep]] = {}
    seen: set[int] = set()
    for node_id in report.distinct_node_ids:
        if node_id in seen or node_id not in tree.nodes:
            continue
        seen.add(node_id)
        node = tree.node(node_id)
        if not node.active or node.axis not in axis_priority:
            continue
        buckets.setdefault(node.axis, []).append(ChainStep(node.id, node.axis, node.name))
    ordered_axes = [a for a in axis_priority if a in buckets]
    if not ordered_axes:
        return []
    for axis in ordered_axes:
        buckets[axis].sort(key=lambda s: s.node_id)
    chains = []
    for combo in product(*(buckets[a] for a in ordered_axes)):
        chains.append(InferenceChain(steps=list(combo), source_record=report.doc_id))
        if len(chains) >= max_chains:
            break
    return chains


def _render_entity_paths(tree: TaxonomyTree, node_ids: Sequence[int]) -> list[str]:
    return [".".join(tree.path_of(node_id)) for node_id in node_ids]


def build_track1_request(record: dict, tree: TaxonomyTree) -> tuple[str, RecaptionSample]:
    """Render the re-captioning prompt for one acquisition record.

    The record dict needs "alt_text" and linked entity node ids under
    "entities" (falling back to a single "anchor_node"). Returns the prompt
    and the sample shell awaiting the generated caption.
    """
    alt_text = str(record.get("alt_text", "")).strip()
    node_ids = record.get("entities")
    if not node_ids:
        anchor = record.get("anchor_node")
        node_ids = [anchor] if anchor is not None else []
    node_ids = [n for n in node_ids if n in tree.nodes and tree.node(n).active]
    if not node_ids:
        raise NoLinkedEntities("record has no linked taxonomy entities")
    paths = _render_entity_paths(tree, node_ids)
    entities = [(tree.node(n).name, tree.node(n).axis) for n in node_ids]
    prompt = TRACK1_TEMPLATE.replace("{original_caption}", alt_text)
    prompt = prompt.replace("{entities}", json.dumps(paths, ensure_ascii=False))
    sample = RecaptionSample(
        image_ref=str(record.get("image_ref", "")),
        original_caption=alt_text,
        linked_entity_paths=paths,
        linked_entities=entities,
    )
    return prompt, sample


_PARAGRAPH_BREAK = re.compile(r"\n\s*\n")


def validate_caption(sample: RecaptionSample) -> Validation:
    """Single paragraph, minimum length, and per-axis surface coverage."""
    causes = []
    caption = sample.generated_caption.strip()
    if not caption:
        causes.append("EmptyCaption")
    if _PARAGRAPH_BREAK.search(caption):
        causes.append("MultiParagraph")
    if len(caption.split()) < MIN_CAPTION_WORDS:
        causes.append("TooShort")
    folded = caption.casefold()
    axes = {axis for _, axis in sample.linked_entities}
    for axis in sorted(axes):
        surfaces = [s for s, a in sample.linked_entities if a == axis]
        if not any(s.casefold() in folded for s in surfaces):
            causes.append(f"MissingAxis:{axis}")
    return Validation(passed=not causes, causes=causes)


def generate_track1(
    records: Sequence[dict], tree: TaxonomyTree, provider
) -> list[RecaptionSample]:
    samples = []
    for record in records:
        prompt, sample = build_track1_request(record, tree)
        sample.generated_caption = provider.generate(prompt).strip()
        sample.validation = validate_caption(sample)
        samples.append(sample)
    return samples


def build_track2_request(chain: InferenceChain, question_type: str) -> str:
    if question_type not in QUESTION_TYPES:
        raise ValueError(f"question_type must be one of {QUESTION_TYPES}")
    if not chain.steps:
        raise ValueError("chain has no steps")
    prompt = TRACK2_TEMPLATE.replace("{inference_chain}", chain.render())
    return prompt.replace("{question_type}", question_type)


_FENCE = re.compile(r"^```(?:json)?\s*\n(.*?)\n```\s*$", re.DOTALL)


def parse_vqa_json(text: str) -> ReasoningSample:
    """Strict JSON parse with a single fence-stripping retry.

    Anything else (prose wrappers, trailing commentary, wrong shapes) is a
    ParseFailure; absent required fields are MissingField.
    """
    stripped = text.strip()
    try:
        obj = json.loads(stripped)
    except ValueError:
        fence = _FENCE.match(stripped)
        if fence is None:
            raise ParseFailure("response is not valid JSON")
        try:
            obj = json.loads(fence.group(1))
        except ValueError as exc:
            raise ParseFailure(f"fenced block is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ParseFailure("response must be a JSON object")
    for key in ("target_knowledge_path", "question_type", "vqa_data"):
        if key not in obj:
            raise MissingField(f"missing {key!r}")
    if obj["question_type"] not in QUESTION_TYPES:
        raise ParseFailure(f"unknown question_type {obj['question_type']!r}")
    vqa = obj["vqa_data"]
    if not isinstance(vqa, dict):
        raise ParseFailure("vqa_data must be an object")
    for key in ("question", "correct_answer", "explanation"):
        if key not in vqa:
            raise MissingField(f"missing vqa_data.{key!r}")
    options = vqa.get("options")
    if options is not None and not isinstance(options, list):
        raise ParseFailure("options must be an array when present")
    return ReasoningSample(
        target_knowledge_path=str(obj["target_knowledge_path"]),
        question_type=str(obj["question_type"]),
        question=str(vqa["question"]),
        options=None if options is None else [str(o) for o in options],
        correct_answer=str(vqa["correct_answer"]),
        explanation=str(vqa["explanation"]),
    )


def validate_vqa(sample: ReasoningSample, chain: InferenceChain) -> Validation:
    """Shape rules per question type plus grounding in the source chain."""
    causes = []
    if sample.question_type == "MCQ":
        options = sample.options or []
        if len(options) != 4:
            causes.append("OptionCount")
        else:
            bodies = []
            for prefix, option in zip(MCQ_PREFIXES, options):
                if not option.startswith(prefix):
                    causes.append("OptionPrefix")
                    break
                bodies.append(option[len(prefix):].strip())
            if len(bodies) == 4 and len({b.casefold() for b in bodies}) != 4:
                causes.append("DuplicateOptions")
            if sample.correct_answer not in ("A", "B", "C", "D"):
                causes.append("AnswerDomain")
            elif len(bodies) == 4:
                winner = bodies["ABCD".index(sample.correct_answer)]
                if winner and winner.casefold() in sample.question.casefold():
                    causes.append("AnswerLeak")
    else:
        if sample.options is not None:
            causes.append("OptionsPresent")
        if sample.correct_answer not in INTERPRETATION_ANSWERS:
            causes.append("AnswerDomain")
    if not sample.explanation.strip():
        causes.append("EmptyExplanation")
    else:
        folded = sample.explanation.casefold()
        if not any(name.casefold() in folded for name in chain.entity_names()):
            causes.append("NoChainEntity")
    return Validation(passed=not causes, causes=causes)


def question_type_for(record_id: str) -> str:
    """Deterministic MCQ/Interpretation alternation keyed by record id.

    Numeric ids alternate by parity; other ids hash through crc32 so the
    split stays stable across runs.
    """
    try:
        value = int(record_id)
    except (TypeError, ValueError):
        value = zlib.crc32(str(record_id).encode("utf-8"))
    return "MCQ" if value % 2 == 0 else "Interpretation"


def generate_track2(
    chains: Sequence[InferenceChain], provider
) -> list[tuple[InferenceChain, Optional[ReasoningSample], Optional[str]]]:
    """Generate one sample per chain; returns (chain, sample or None, error)."""
    out = []
    for index, chain in enumerate(chains):
        qtype = question_type_for(f"{chain.source_record}:{index}")
        prompt = build_track2_request(chain, qtype)
        text = provider.generate(prompt)
        try:
            sample = parse_vqa_json(text)
        except (ParseFailure, MissingField) as exc:
            out.append((chain, None, str(exc)))
            continue
        sample.validation = validate_vqa(sample, chain)
        out.append((chain, sample, None))
    return out


def export(
    track1: Sequence[RecaptionSample],
    track2: Sequence[tuple[InferenceChain, Optional[ReasoningSample], Optional[str]]],
    out_dir: str | Path,
) -> dict:
    """Write pass/fail JSONL pairs for both tracks; returns counts.

    Passing VQA lines carry exactly the strict-JSON fields; failures land
    in sidecars with their causes. Re-export overwrites, so runs are
    idempotent.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = {"track1": {"pass": 0, "fail": 0}, "track2": {"pass": 0, "fail": 0}}

    with open(out_dir / "recaptions.jsonl", "w", encoding="utf-8") as ok_fh, open(
        out_dir / "recaptions.failed.jsonl", "w", encoding="utf-8"
    ) as bad_fh:
        for sample in track1:
            record = sample.to_json()
            if sample.validation is not None and sample.validation.passed:
                counts["track1"]["pass"] += 1
                ok_fh.write(json.dumps(record, ensure_ascii=False) + "\n")
            else:
                counts["track1"]["fail"] += 1
                bad_fh.write(json.dumps(record, ensure_ascii=False) + "\n")

    with open(out_dir / "vqa.jsonl", "w", encoding="utf-8") as ok_fh, open(
        out_dir / "vqa.failed.jsonl", "w", encoding="utf-8"
    ) as bad_fh:
        for chain, sample, error in track2:
            if sample is not None and sample.validation is not None and sample.validation.passed:
                counts["track2"]["pass"] += 1
                ok_fh.write(json.dumps(sample.to_json(), ensure_ascii=False) + "\n")
            else:
                counts["track2"]["fail"] += 1
                bad_fh.write(
                    json.dumps(
                        {
                            "chain": chain.render(),
                            "source_record": chain.source_record,
                            "sample": sample.to_json() if sample is not None else None,
                            "causes": (
                                sample.validation.causes
                                if sample is not None and sample.validation is not None
                                else [error or "ParseFailure"]
                            ),
                        },
                        ensure_ascii=False,
                    )
                    + "\n"
                )
    return counts
