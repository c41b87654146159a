"""Asymmetric coverage scoring between labeled embedding sets.

amcs(target, reference) answers "how well does the reference cover the
target": each target item finds its best cosine match in the reference and
the scores are averaged. It is deliberately not symmetric; a reference that
is a superset of the target covers it perfectly while the reverse direction
can be much lower.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptySet

_UNIT_TOL = 1e-6


@dataclass
class EmbeddingSet:
    labels: list[str]
    vectors: np.ndarray

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] == 0:
            raise EmptySet("embedding set must contain at least one vector")
        if len(self.labels) != self.vectors.shape[0]:
            raise ValueError("labels and vectors disagree in length")
        norms = np.linalg.norm(self.vectors, axis=1)
        if np.any(np.abs(norms - 1.0) > _UNIT_TOL):
            raise ValueError("vectors must be unit-norm")

    def __len__(self) -> int:
        return self.vectors.shape[0]


def amcs(target: EmbeddingSet, reference: EmbeddingSet) -> float:
    """Mean over target items of the max cosine similarity to the reference."""
    if len(target) == 0 or len(reference) == 0:
        raise EmptySet("both sets must be non-empty")
    if target.vectors.shape[1] != reference.vectors.shape[1]:
        raise DimensionMismatch(
            f"target dim {target.vectors.shape[1]} != reference dim {reference.vectors.shape[1]}"
        )
    sims = target.vectors @ reference.vectors.T
    return float(sims.max(axis=1).mean())


@dataclass
class CoverageReport:
    forward: float                      # amcs(target, reference)
    backward: float                     # amcs(reference, target)
    per_item_max: list[tuple[str, str, float]]  # (target label, best ref label, cosine)

    def to_json(self) -> dict:
        return {
            "forward": self.forward,
            "backward": self.backward,
            "per_item_max": [
                {"target": t, "best_reference": r, "cosine": c}
                for t, r, c in self.per_item_max
            ],
        }


def coverage_report(target: EmbeddingSet, reference: EmbeddingSet) -> CoverageReport:
    """Both directions plus the per-target best-match decomposition."""
    if len(target) == 0 or len(reference) == 0:
        raise EmptySet("both sets must be non-empty")
    if target.vectors.shape[1] != reference.vectors.shape[1]:
        raise DimensionMismatch("target and reference dims differ")
    sims = target.vectors @ reference.vectors.T
    best = sims.argmax(axis=1)
    per_item = [
        (target.labels[i], reference.labels[int(best[i])], float(sims[i, int(best[i])]))
        for i in range(len(target))
    ]
    return CoverageReport(
        forward=float(sims.max(axis=1).mean()),
        backward=amcs(reference, target),
        per_item_max=per_item,
    )
