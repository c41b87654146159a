"""Shared fixtures and brute-force oracles used across the suite."""

from __future__ import annotations

import numpy as np
import pytest

from met.taxonomy import TaxonomyTree


def unit(vec) -> np.ndarray:
    arr = np.asarray(vec, dtype=np.float64)
    return arr / np.linalg.norm(arr)


def naive_matches(patterns: list[str], text: str) -> set[tuple[int, int, int]]:
    """Brute-force multi-pattern search: every (start, end, pattern index)."""
    hits = set()
    for pid, pat in enumerate(patterns):
        start = 0
        while True:
            idx = text.find(pat, start)
            if idx < 0:
                break
            hits.add((idx, idx + len(pat), pid))
            start = idx + 1
    return hits


def brute_silhouette(vectors: np.ndarray, labels: list[int]) -> float:
    """Textbook per-point silhouette, quadratic and dumb on purpose."""
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = list(labels)
    n = len(labels)
    clusters = sorted(set(labels))
    scores = []
    for i in range(n):
        own = labels[i]
        own_members = [j for j in range(n) if labels[j] == own and j != i]
        if not own_members:
            scores.append(0.0)
            continue
        a = sum(np.linalg.norm(vectors[i] - vectors[j]) for j in own_members) / len(own_members)
        b = min(
            sum(np.linalg.norm(vectors[i] - vectors[j]) for j in range(n) if labels[j] == c)
            / labels.count(c)
            for c in clusters
            if c != own
        )
        denom = max(a, b)
        scores.append(0.0 if denom <= 0 else (b - a) / denom)
    return float(np.mean(scores))


def brute_amcs(target: np.ndarray, reference: np.ndarray) -> float:
    total = 0.0
    for t in target:
        best = max(float(np.dot(t, r)) for r in reference)
        total += best
    return total / len(target)


def build_frozen_core() -> tuple[TaxonomyTree, dict[str, int]]:
    """Small all-frozen skeleton spanning two axes and four tiers."""
    tree = TaxonomyTree()
    ids: dict[str, int] = {}

    def add(parent: str | None, name: str, axis: str, frequency: int = 0) -> int:
        node_id = tree.add_node(
            ids[parent] if parent else None, name, axis, frequency=frequency,
            actor="human", reasoning="core skeleton",
        )
        ids[name] = node_id
        tree.freeze_node(node_id, actor="human")
        return node_id

    add(None, "Diseases", "disease", 100)
    add(None, "Anatomy", "anatomy", 60)
    add("Diseases", "Neurological Disorders", "disease", 55)
    add("Diseases", "Infectious Diseases", "disease", 45)
    add("Anatomy", "Thorax", "anatomy", 60)
    add("Neurological Disorders", "Seizure Disorders", "disease", 30)
    add("Infectious Diseases", "Viral Infections", "disease", 25)
    add("Thorax", "Lungs", "anatomy", 40)
    add("Seizure Disorders", "Epilepsy", "disease", 18)
    add("Viral Infections", "Hepatitis", "disease", 12)
    return tree, ids


@pytest.fixture
def frozen_core():
    return build_frozen_core()
