"""Embedding clustering and bottom-up taxonomy construction.

k-means and silhouette are written out by hand: the k-range sweep, the
tie-toward-smaller-k rule, the singleton convention and the monotonicity
guarantee are all contract surface here, and burying them in a library
call would leave those behaviors unpinned.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DegenerateInput,
    DimensionMismatch,
    ProviderFailure,
    SingleCluster,
    TooFewPoints,
    ZeroNorm,
    ZeroTotalFrequency,
)
from .taxonomy import AXES, TaxonomyTree

CONVERGENCE_EPS = 1e-6
MAX_ITERATIONS = 100
MAX_K = 20
SILHOUETTE_SAMPLE_CAP = 2000
_TINY = 1e-12


def embed_texts(texts: Sequence[str], provider) -> np.ndarray:
    """Embed texts into unit-norm rows; validates shape and finiteness."""
    if not texts:
        raise ValueError("texts must be non-empty")
    vectors = provider.embed(list(texts))
    if len(vectors) != len(texts):
        raise ProviderFailure("provider returned wrong number of vectors")
    dims = {len(v) for v in vectors}
    if len(dims) != 1:
        raise DimensionMismatch(f"inconsistent embedding dims {sorted(dims)}")
    arr = np.asarray(vectors, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ProviderFailure("embedding contains non-finite values")
    norms = np.linalg.norm(arr, axis=1)
    if np.any(norms < _TINY):
        raise ProviderFailure("embedding has zero norm")
    return arr / norms[:, None]


@dataclass
class ClusterAssignment:
    labels: list[int]
    centroids: np.ndarray
    k: int
    inertia: float
    inertia_history: list[float] = field(default_factory=list)


def _plusplus_init(vectors: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = vectors.shape[0]
    centers = np.empty((k, vectors.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = vectors[first]
    dist2 = np.sum((vectors - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = float(dist2.sum())
        if total <= _TINY:
            # remaining mass is zero: all points coincide with chosen centers
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=dist2 / total))
        centers[i] = vectors[idx]
        dist2 = np.minimum(dist2, np.sum((vectors - centers[i]) ** 2, axis=1))
    return centers


def kmeans(vectors: np.ndarray, k: int, seed: int = 0) -> ClusterAssignment:
    """Lloyd iteration with k-means++ seeding.

    Stops when the max centroid shift drops below CONVERGENCE_EPS or after
    MAX_ITERATIONS. Ties in point assignment go to the lowest cluster index;
    empty clusters are refilled with the point farthest from its centroid,
    so every returned cluster is non-empty.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    n = vectors.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if k > 1 and np.allclose(vectors, vectors[0], atol=1e-12):
        raise DegenerateInput("all points identical; no multi-cluster structure")

    rng = np.random.default_rng(seed)
    centroids = _plusplus_init(vectors, k, rng)
    labels = np.zeros(n, dtype=np.int64)
    history: list[float] = []
    for _ in range(MAX_ITERATIONS):
        # squared distances, points x centroids
        d2 = ((vectors[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(d2, axis=1)
        point_d2 = d2[np.arange(n), labels]

        for cluster in range(k):
            if not np.any(labels == cluster):
                victim = int(np.argmax(point_d2))
                labels[victim] = cluster
                point_d2[victim] = 0.0

        inertia = 0.0
        new_centroids = centroids.copy()
        for cluster in range(k):
            members = vectors[labels == cluster]
            new_centroids[cluster] = members.mean(axis=0)
            inertia += float(((members - new_centroids[cluster]) ** 2).sum())
        if history and inertia > history[-1] + 1e-9:
            raise AssertionError("inertia increased between iterations")
        history.append(inertia)

        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if shift < CONVERGENCE_EPS:
            break
    return ClusterAssignment(labels.tolist(), centroids, k, history[-1], history)


def silhouette(vectors: np.ndarray, assignment: ClusterAssignment) -> float:
    """Mean silhouette over all points: (b - a) / max(a, b).

    Singleton clusters contribute 0 for their lone point, as does any point
    where a == b == 0.
    """
    if assignment.k < 2:
        raise SingleCluster("silhouette needs at least 2 clusters")
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(assignment.labels)
    n = vectors.shape[0]
    diff = vectors[:, None, :] - vectors[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))

    scores = np.zeros(n)
    cluster_ids = np.unique(labels)
    masks = {c: labels == c for c in cluster_ids}
    sizes = {c: int(masks[c].sum()) for c in cluster_ids}
    for i in range(n):
        own = labels[i]
        if sizes[own] == 1:
            scores[i] = 0.0
            continue
        a = dist[i][masks[own]].sum() / (sizes[own] - 1)
        b = min(
            dist[i][masks[c]].mean() for c in cluster_ids if c != own
        )
        denom = max(a, b)
        scores[i] = 0.0 if denom <= 0.0 else (b - a) / denom
    return float(scores.mean())


def select_k(
    vectors: np.ndarray,
    k_min: int = 2,
    k_max: Optional[int] = None,
    seed: int = 0,
) -> tuple[int, ClusterAssignment]:
    """Sweep k and keep the silhouette maximizer, ties toward smaller k.

    Above SILHOUETTE_SAMPLE_CAP points the silhouette is computed on a
    seeded uniform subsample; the assignment itself always covers every
    point.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    n = vectors.shape[0]
    if k_max is None:
        k_max = min(MAX_K, n - 1)
    if not 2 <= k_min <= k_max <= n - 1:
        raise TooFewPoints(
            f"need 2 <= k_min <= k_max <= n-1, got k_min={k_min} k_max={k_max} n={n}"
        )
    sample_idx = None
    if n > SILHOUETTE_SAMPLE_CAP:
        rng = np.random.default_rng(seed)
        sample_idx = np.sort(rng.choice(n, size=SILHOUETTE_SAMPLE_CAP, replace=False))

    best: Optional[tuple[float, int, ClusterAssignment]] = None
    for k in range(k_min, k_max + 1):
        assignment = kmeans(vectors, k, seed=seed)
        if sample_idx is None:
            score = silhouette(vectors, assignment)
        else:
            sub_labels = [assignment.labels[i] for i in sample_idx]
            present = len(set(sub_labels))
            if present < 2:
                score = -1.0
            else:
                sub = ClusterAssignment(sub_labels, assignment.centroids, present, 0.0)
                score = silhouette(vectors[sample_idx], sub)
        if best is None or score > best[0] + 1e-12:
            best = (score, k, assignment)
    assert best is not None
    return best[1], best[2]


def aggregate_weighted(children: Sequence[tuple[np.ndarray, int]]) -> np.ndarray:
    """Frequency-weighted mean of child embeddings, renormalized to unit length."""
    if not children:
        raise ValueError("children must be non-empty")
    total = sum(freq for _, freq in children)
    if total <= 0:
        raise ZeroTotalFrequency("child frequencies sum to zero")
    dim = len(children[0][0])
    acc = np.zeros(dim, dtype=np.float64)
    for vec, freq in children:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (dim,):
            raise DimensionMismatch("child embedding dims differ")
        acc += (freq / total) * vec
    norm = float(np.linalg.norm(acc))
    if norm < _TINY:
        raise ZeroNorm("weighted child embeddings cancel out")
    return acc / norm


@dataclass
class _Level:
    name: str
    frequency: int
    embedding: np.ndarray
    axis: str
    children: list["_Level"] = field(default_factory=list)
    display: Optional[str] = None


def _majority_axis(children: list[_Level]) -> str:
    weight: dict[str, int] = {}
    for child in children:
        weight[child.axis] = weight.get(child.axis, 0) + child.frequency
    # highest weight wins; ties resolved by canonical axis order
    return min(weight, key=lambda a: (-weight[a], AXES.index(a)))


def _group_level(items: list[_Level], parent_tier: int, seed: int) -> list[_Level]:
    """Cluster one level of nodes into parents for `parent_tier`.

    Fewer than 3 items cannot support a k >= 2 sweep, so each item becomes
    its own parent and the chain collapses upward unchanged.
    """
    if len(items) < 3:
        groups = [[item] for item in items]
    else:
        matrix = np.stack([item.embedding for item in items])
        _, assignment = select_k(matrix, 2, min(MAX_K, len(items) - 1), seed=seed)
        groups_map: dict[int, list[_Level]] = {}
        for item, label in zip(items, assignment.labels):
            groups_map.setdefault(label, []).append(item)
        groups = [groups_map[label] for label in sorted(groups_map)]
    parents = []
    for index, group in enumerate(groups):
        emb = aggregate_weighted([(g.embedding, g.frequency) for g in group])
        parents.append(
            _Level(
                name=f"group-{parent_tier}-{index}",
                frequency=sum(g.frequency for g in group),
                embedding=emb,
                axis=_majority_axis(group),
                children=group,
            )
        )
    return parents


def build_hierarchy(
    table,
    embeddings: dict[str, np.ndarray],
    axis_map: Optional[dict[str, str]] = None,
    seed: int = 0,
) -> TaxonomyTree:
    """Build a five-tier candidate tree from a cleansed frequency table.

    Entities sit at tier 5 under their extraction types (tier 4); types are
    clustered into tier 3 groups, then tier 2, then tier 1.  Internal node
    embeddings come from frequency-weighted aggregation of their children,
    and internal axes from the frequency-majority of child axes.  Fully
    deterministic for a fixed seed.
    """
    axis_map = axis_map or {}
    if not table.type_members:
        raise ValueError("table has no surviving types; cleanse thresholds too strict?")

    type_levels: list[_Level] = []
    for tkey in sorted(table.type_members):
        axis = axis_map.get(tkey, "other")
        if axis not in AXES:
            raise ValueError(f"axis map sends {tkey!r} to unknown axis {axis!r}")
        members = sorted(table.type_members[tkey])
        children = []
        for ekey in members:
            if ekey not in embeddings:
                raise ValueError(f"no embedding for surviving entity {ekey!r}")
            children.append(
                _Level(
                    name=ekey,
                    frequency=table.entity_counts[ekey],
                    embedding=np.asarray(embeddings[ekey], dtype=np.float64),
                    axis=axis,
                    display=table.display_name(ekey),
                )
            )
        emb = aggregate_weighted([(c.embedding, c.frequency) for c in children])
        type_levels.append(
            _Level(
                name=tkey,
                frequency=sum(c.frequency for c in children),
                embedding=emb,
                axis=axis,
                children=children,
                display=table.display_name(tkey),
            )
        )

    level = type_levels
    for parent_tier in (3, 2, 1):
        level = _group_level(level, parent_tier, seed=seed)

    tree = TaxonomyTree()

    def insert(items: list[_Level], parent_id: Optional[int]) -> None:
        for item in items:
            node_id = tree.add_node(
                parent_id,
                item.display or item.name,
                item.axis,
                frequency=item.frequency,
                embedding=item.embedding.tolist(),
                actor="rule",
                reasoning="hierarchy bootstrap",
            )
            insert(item.children, node_id)

    insert(level, None)
    tree.check_invariants()
    return tree
