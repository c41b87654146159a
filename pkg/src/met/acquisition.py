"""Taxonomy-guided image acquisition cascade.

Candidates retrieved per taxonomy node flow through a fixed stage order:
teacher-sampled student filtering, coarse text-image alignment, fine
judge alignment, near-duplicate collapse and benchmark-leakage removal.
Every record keeps an ordered verdict trail, so any survivor can show a
pass at each stage and any reject names the stage that cut it.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    ClientFailure,
    DecodeFailure,
    DegenerateLabels,
    JudgeFailure,
    MissingEmbedding,
    StalePath,
)
from .taxonomy import TaxonomyTree

STAGES = ("retrieve", "student_filter", "coarse_align", "fine_align", "dedup", "leakage")

DEFAULT_COARSE_THRESHOLD = 0.3
DEFAULT_STUDENT_THRESHOLD = 0.5
DEFAULT_HAMMING_MAX = 8
DEFAULT_COSINE_MAX = 0.95
DEFAULT_SAMPLE_RATE = 0.01


@dataclass
class CandidateRecord:
    id: str
    image_ref: str
    alt_text: str
    source_url: str
    anchor_node: int
    anchor_name: str = ""
    scores: dict = field(default_factory=dict)
    verdicts: list = field(default_factory=list)  # ordered (stage, pass/fail, cause)
    image_embedding: Optional[np.ndarray] = None
    dhash: Optional[int] = None

    def verdict_for(self, stage: str) -> Optional[tuple]:
        for v in reversed(self.verdicts):
            if v[0] == stage:
                return tuple(v)
        return None

    def passed(self, stage: str) -> bool:
        v = self.verdict_for(stage)
        return v is not None and v[1] == "pass"

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "image_ref": self.image_ref,
            "alt_text": self.alt_text,
            "source_url": self.source_url,
            "anchor_node": self.anchor_node,
            "anchor_name": self.anchor_name,
            "scores": {k: round(float(v), 10) for k, v in sorted(self.scores.items())},
            "verdicts": [list(v) for v in self.verdicts],
            "dhash": None if self.dhash is None else format(self.dhash, "016x"),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CandidateRecord":
        rec = cls(
            id=str(obj["id"]),
            image_ref=obj.get("image_ref", ""),
            alt_text=obj.get("alt_text", ""),
            source_url=obj.get("url", obj.get("source_url", "")),
            anchor_node=int(obj.get("anchor_node", -1)),
            anchor_name=obj.get("anchor_name", ""),
        )
        rec.scores = {k: float(v) for k, v in obj.get("scores", {}).items()}
        rec.verdicts = [tuple(v) for v in obj.get("verdicts", [])]
        if obj.get("dhash") is not None:
            raw = obj["dhash"]
            rec.dhash = int(raw, 16) if isinstance(raw, str) else int(raw)
        if obj.get("embedding") is not None:
            rec.image_embedding = np.asarray(obj["embedding"], dtype=np.float64)
        return rec


def node_guided_retrieve(
    tree: TaxonomyTree, node_id: int, client, limit: int = 50
) -> list[CandidateRecord]:
    """Query the retrieval backend with the node name plus its ancestor names.

    The hierarchy context disambiguates short entity names ("colon" the
    organ vs the punctuation) without any per-node prompt engineering.
    """
    node = tree.node(node_id)
    if not node.active:
        raise StalePath(f"node {node_id} is pruned")
    path = tree.path_of(node_id)
    query = " ".join([path[-1]] + path[:-1])
    try:
        raw = client.query(query, limit)
    except ClientFailure:
        raise
    except Exception as exc:
        raise ClientFailure(f"retrieval backend failed: {exc}") from exc
    records = []
    for item in raw[:limit]:
        rec = CandidateRecord(
            id=str(item["id"]),
            image_ref=str(item.get("image_path", "")),
            alt_text=str(item.get("alt_text", "")),
            source_url=str(item.get("url", "")),
            anchor_node=node_id,
            anchor_name=node.name,
        )
        if item.get("embedding") is not None:
            vec = np.asarray(item["embedding"], dtype=np.float64)
            norm = float(np.linalg.norm(vec))
            rec.image_embedding = vec / norm if norm > 0 else vec
        if item.get("dhash") is not None:
            raw_hash = item["dhash"]
            rec.dhash = int(raw_hash, 16) if isinstance(raw_hash, str) else int(raw_hash)
        rec.verdicts.append(("retrieve", "pass", None))
        records.append(rec)
    return records


def teacher_label(
    records: Sequence[CandidateRecord],
    teacher,
    sample_rate: float = DEFAULT_SAMPLE_RATE,
    seed: int = 0,
) -> list[tuple[CandidateRecord, object]]:
    """Label a seeded uniform sample; per-record teacher failures are skipped.

    The sample feeds student training, so losing a record to a flaky
    teacher shrinks the training set instead of aborting the run.
    """
    if not 0.0 < sample_rate <= 1.0:
        raise ValueError("sample_rate must be in (0, 1]")
    rng = random.Random(seed)
    labeled = []
    for record in records:
        if rng.random() > sample_rate:
            continue
        try:
            label = teacher.label(record)
        except Exception:
            continue
        labeled.append((record, label))
    return labeled


class StudentModel:
    """Nearest-centroid relevance scorer distilled from teacher labels.

    Scores live in [0, 1] with 0.5 the decision boundary: score =
    0.5 + (cos_pos - cos_neg) / 4, so a record closer to the positive
    centroid than the negative one scores above 0.5.
    """

    def __init__(self, positive: np.ndarray, negative: np.ndarray) -> None:
        self.positive = positive
        self.negative = negative

    def score(self, record: CandidateRecord) -> float:
        if record.image_embedding is None:
            raise MissingEmbedding(f"record {record.id} has no image embedding")
        vec = record.image_embedding
        norm = float(np.linalg.norm(vec))
        if norm <= 0:
            raise MissingEmbedding(f"record {record.id} embedding has zero norm")
        vec = vec / norm
        cos_pos = float(vec @ self.positive)
        cos_neg = float(vec @ self.negative)
        return 0.5 + (cos_pos - cos_neg) / 4.0


def train_student(labeled: Sequence[tuple[CandidateRecord, object]]) -> StudentModel:
    positives = []
    negatives = []
    for record, label in labeled:
        if record.image_embedding is None:
            raise MissingEmbedding(f"labeled record {record.id} has no image embedding")
        bucket = positives if getattr(label, "is_medical") else negatives
        bucket.append(np.asarray(record.image_embedding, dtype=np.float64))
    if not positives or not negatives:
        raise DegenerateLabels("student training needs both positive and negative labels")

    def centroid(vectors: list[np.ndarray]) -> np.ndarray:
        mean = np.mean(vectors, axis=0)
        norm = float(np.linalg.norm(mean))
        if norm <= 0:
            raise DegenerateLabels("class centroid has zero norm")
        return mean / norm

    return StudentModel(centroid(positives), centroid(negatives))


def student_filter(
    records: Sequence[CandidateRecord],
    student: StudentModel,
    threshold: float = DEFAULT_STUDENT_THRESHOLD,
) -> list[CandidateRecord]:
    kept = []
    for record in records:
        score = student.score(record)
        record.scores["student_filter"] = score
        if score >= threshold:
            record.verdicts.append(("student_filter", "pass", None))
            kept.append(record)
        else:
            record.verdicts.append(
                ("student_filter", "fail", f"score {score:.4f} < {threshold}")
            )
    return kept


def coarse_align(
    record: CandidateRecord,
    text_embedder,
    threshold: float = DEFAULT_COARSE_THRESHOLD,
) -> str:
    """Cosine gate between the image embedding and the anchor entity name.

    The threshold is inclusive: exactly-at-threshold candidates pass.
    """
    if record.image_embedding is None:
        raise MissingEmbedding(f"record {record.id} has no image embedding")
    if not record.anchor_name:
        raise ValueError(f"record {record.id} has no anchor name")
    text_vec = np.asarray(text_embedder.embed([record.anchor_name])[0], dtype=np.float64)
    text_vec = text_vec / float(np.linalg.norm(text_vec))
    img = record.image_embedding
    img = img / float(np.linalg.norm(img))
    cosine = float(img @ text_vec)
    record.scores["coarse_align"] = cosine
    if cosine >= threshold:
        record.verdicts.append(("coarse_align", "pass", None))
        return "pass"
    record.verdicts.append(("coarse_align", "fail", f"cosine {cosine:.4f} < {threshold}"))
    return "fail"


def fine_align(record: CandidateRecord, judge) -> str:
    """Judge verdict; backend failures quarantine instead of silently passing."""
    if not record.passed("coarse_align"):
        raise ValueError(f"record {record.id} has not passed coarse alignment")
    try:
        ok, rationale = judge.judge(record)
    except JudgeFailure as exc:
        record.verdicts.append(("fine_align", "fail", f"quarantined: {exc}"))
        return "quarantine"
    if ok:
        record.verdicts.append(("fine_align", "pass", rationale or None))
        return "pass"
    record.verdicts.append(("fine_align", "fail", rationale or "judge rejected"))
    return "fail"


# ---------------------------------------------------------------- perceptual


def _bilinear_resize(gray: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = gray.shape
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = gray[np.ix_(y0, x0)] * (1 - fx) + gray[np.ix_(y0, x1)] * fx
    bottom = gray[np.ix_(y1, x0)] * (1 - fx) + gray[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bottom * fy


def dhash(pixels) -> int:
    """64-bit difference hash over a 9x8 grayscale reduction.

    Grayscale is the integer-friendly (299 r + 587 g + 114 b) / 1000 mix;
    each bit compares a pixel with its right neighbor, packed row-major,
    first comparison in the most significant bit. Uniform brightness shifts
    leave the hash unchanged.
    """
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape[2] < 3:
            raise DecodeFailure("pixel array must have 3 channels")
        gray = (299 * arr[..., 0] + 587 * arr[..., 1] + 114 * arr[..., 2]) / 1000.0
    elif arr.ndim == 2:
        gray = arr
    else:
        raise DecodeFailure(f"unsupported pixel array shape {arr.shape}")
    if gray.shape[0] < 1 or gray.shape[1] < 1:
        raise DecodeFailure("image has no pixels")
    small = _bilinear_resize(gray, 8, 9)
    value = 0
    for row in range(8):
        for col in range(8):
            value = (value << 1) | int(small[row, col] > small[row, col + 1])
    return value


def hamming(a: int, b: int) -> int:
    return bin(a ^ b).count("1")


def load_image_pixels(path: str | Path) -> np.ndarray:
    try:
        from PIL import Image

        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except Exception as exc:
        raise DecodeFailure(f"cannot decode image {path}: {exc}") from exc


class _UnionFind:
    def __init__(self, n: int) -> None:
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i: int, j: int) -> None:
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[max(ri, rj)] = min(ri, rj)


def dedup(
    records: Sequence[CandidateRecord],
    hamming_max: int = DEFAULT_HAMMING_MAX,
    cosine_max: float = DEFAULT_COSINE_MAX,
) -> tuple[list[CandidateRecord], list[list[str]]]:
    """Union-find collapse of near-duplicates; keeps the earliest per group.

    Two records join when their dhash hamming distance is <= hamming_max OR
    their embedding cosine is >= cosine_max. Both cutoffs are inclusive.
    Returns (kept records, groups as record-id lists).
    """
    records = list(records)
    for record in records:
        if record.dhash is None:
            raise ValueError(f"record {record.id} has no dhash")
        if record.image_embedding is None:
            raise MissingEmbedding(f"record {record.id} has no image embedding")
    n = len(records)
    uf = _UnionFind(n)
    units = []
    for record in records:
        vec = np.asarray(record.image_embedding, dtype=np.float64)
        norm = float(np.linalg.norm(vec))
        units.append(vec / norm if norm > 0 else vec)
    for i in range(n):
        for j in range(i + 1, n):
            if hamming(records[i].dhash, records[j].dhash) <= hamming_max:
                uf.union(i, j)
                continue
            if float(units[i] @ units[j]) >= cosine_max:
                uf.union(i, j)
    groups_map: dict[int, list[int]] = {}
    for i in range(n):
        groups_map.setdefault(uf.find(i), []).append(i)
    kept = []
    groups = []
    for root in sorted(groups_map):
        members = groups_map[root]
        groups.append([records[i].id for i in members])
        keeper = members[0]
        records[keeper].verdicts.append(("dedup", "pass", None))
        kept.append(records[keeper])
        for i in members[1:]:
            records[i].verdicts.append(
                ("dedup", "fail", f"duplicate of {records[keeper].id}")
            )
    return kept, groups


@dataclass
class EvalManifest:
    dhashes: list[int]
    embeddings: np.ndarray  # (m, d) unit rows; may be empty

    @classmethod
    def from_file(cls, path: str | Path) -> "EvalManifest":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        hashes = [
            int(h, 16) if isinstance(h, str) else int(h) for h in data.get("dhashes", [])
        ]
        embs = np.asarray(data.get("embeddings", []), dtype=np.float64)
        if embs.size:
            norms = np.linalg.norm(embs, axis=1)
            embs = embs / norms[:, None]
        return cls(hashes, embs)


def leakage_filter(
    records: Sequence[CandidateRecord],
    manifest: EvalManifest,
    hamming_max: int = DEFAULT_HAMMING_MAX,
    cosine_max: float = DEFAULT_COSINE_MAX,
) -> list[CandidateRecord]:
    """Drop anything near-identical to a benchmark item (inclusive cutoffs)."""
    kept = []
    for record in records:
        leaked = None
        if record.dhash is not None:
            for bench_hash in manifest.dhashes:
                if hamming(record.dhash, bench_hash) <= hamming_max:
                    leaked = f"dhash within {hamming_max} of benchmark item"
                    break
        if leaked is None and manifest.embeddings.size and record.image_embedding is not None:
            vec = np.asarray(record.image_embedding, dtype=np.float64)
            norm = float(np.linalg.norm(vec))
            if norm > 0:
                sims = manifest.embeddings @ (vec / norm)
                if float(sims.max()) >= cosine_max:
                    leaked = f"embedding cosine >= {cosine_max} with benchmark item"
        if leaked is None:
            record.verdicts.append(("leakage", "pass", None))
            kept.append(record)
        else:
            record.verdicts.append(("leakage", "fail", leaked))
    return kept


@dataclass
class PipelineResult:
    kept: list[CandidateRecord]
    rejected: list[CandidateRecord]
    quarantined: list[CandidateRecord]
    stage_counts: dict


def run_pipeline(
    tree: TaxonomyTree,
    node_ids: Sequence[int],
    client,
    teacher,
    judge,
    text_embedder,
    image_embedder=None,
    eval_manifest: Optional[EvalManifest] = None,
    limit: int = 50,
    sample_rate: float = 1.0,
    seed: int = 0,
    student_threshold: float = DEFAULT_STUDENT_THRESHOLD,
    coarse_threshold: float = DEFAULT_COARSE_THRESHOLD,
    hamming_max: int = DEFAULT_HAMMING_MAX,
    cosine_max: float = DEFAULT_COSINE_MAX,
) -> PipelineResult:
    """Full cascade for a set of anchor nodes.

    Records missing embeddings or hashes are filled from the image file
    when one exists, via the image embedder and the difference hash;
    fixture-backed runs normally ship both precomputed. Deterministic for
    fixed seed and backends.
    """
    records: list[CandidateRecord] = []
    for node_id in node_ids:
        records.extend(node_guided_retrieve(tree, node_id, client, limit))

    for record in records:
        needs_pixels = record.image_embedding is None or record.dhash is None
        if needs_pixels and record.image_ref and Path(record.image_ref).is_file():
            pixels = load_image_pixels(record.image_ref)
            if record.dhash is None:
                record.dhash = dhash(pixels)
            if record.image_embedding is None and image_embedder is not None:
                vec = np.asarray(
                    image_embedder.embed([record.image_ref])[0], dtype=np.float64
                )
                record.image_embedding = vec / float(np.linalg.norm(vec))

    labeled = teacher_label(records, teacher, sample_rate=sample_rate, seed=seed)
    student = train_student(labeled)
    stage1 = student_filter(records, student, threshold=student_threshold)

    stage2 = [r for r in stage1 if coarse_align(r, text_embedder, coarse_threshold) == "pass"]

    stage3 = []
    quarantined = []
    for record in stage2:
        outcome = fine_align(record, judge)
        if outcome == "pass":
            stage3.append(record)
        elif outcome == "quarantine":
            quarantined.append(record)

    stage4, _ = dedup(stage3, hamming_max=hamming_max, cosine_max=cosine_max)

    if eval_manifest is not None:
        kept = leakage_filter(stage4, eval_manifest, hamming_max, cosine_max)
    else:
        for record in stage4:
            record.verdicts.append(("leakage", "pass", "no benchmark manifest"))
        kept = stage4

    kept_ids = {r.id for r in kept}
    quarantine_ids = {r.id for r in quarantined}
    rejected = [r for r in records if r.id not in kept_ids and r.id not in quarantine_ids]
    counts = {
        "retrieved": len(records),
        "student_filter": len(stage1),
        "coarse_align": len(stage2),
        "fine_align": len(stage3),
        "dedup": len(stage4),
        "kept": len(kept),
        "quarantined": len(quarantined),
    }
    return PipelineResult(kept, rejected, quarantined, counts)


def save_records(path: str | Path, records: Sequence[CandidateRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_json(), ensure_ascii=False) + "\n")
