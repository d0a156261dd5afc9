"""DBSCAN under cosine distance and the largest-cluster filter."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Sequence, TypeVar

import numpy as np

NOISE = -1

T = TypeVar("T")


@dataclass(frozen=True)
class ClusterParams:
    eps: float = 0.15
    min_samples: int = 5

    def __post_init__(self) -> None:
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        if self.min_samples < 1:
            raise ValueError("min_samples must be at least 1")


@dataclass(frozen=True)
class ClusterAssignment:
    labels: tuple[int, ...]
    cluster_sizes: dict[int, int]
    largest_cluster: int | None

    @classmethod
    def from_labels(cls, labels: Sequence[int]) -> "ClusterAssignment":
        sizes: dict[int, int] = {}
        for lab in labels:
            if lab != NOISE:
                sizes[lab] = sizes.get(lab, 0) + 1
        # max() keeps the first maximum, i.e. the lowest id on ties
        largest = max(sorted(sizes), key=lambda k: sizes[k]) if sizes else None
        return cls(tuple(int(x) for x in labels), sizes, largest)

    def members(self, cluster: int) -> list[int]:
        return [i for i, lab in enumerate(self.labels) if lab == cluster]


def cosine_distance_matrix(points: np.ndarray) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("points must form a 2-D array of equal-length vectors")
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ValueError("cosine distance undefined for zero-norm points")
    unit = x / norms[:, None]
    return 1.0 - np.clip(unit @ unit.T, -1.0, 1.0)


def dbscan(points: Sequence[np.ndarray] | np.ndarray, params: ClusterParams) -> ClusterAssignment:
    """Density clustering with cosine distance ``1 - cos``.

    Neighbourhoods include the point itself. Clusters are grown from core
    points in index order, so cluster ids follow the index of their first
    core point; a border point reachable from several clusters joins the
    lowest id.
    """
    if len(points) == 0:
        raise ValueError("dbscan needs at least one point")
    try:
        x = np.asarray(points, dtype=np.float64)
    except ValueError as exc:
        raise ValueError("dimension mismatch between points") from exc
    dist = cosine_distance_matrix(x)
    adjacency = dist <= params.eps
    core = adjacency.sum(axis=1) >= params.min_samples
    neighbours = [np.flatnonzero(row) for row in adjacency]

    n = len(x)
    labels = np.full(n, NOISE, dtype=int)
    next_id = 0
    for seed in range(n):
        if not core[seed] or labels[seed] != NOISE:
            continue
        labels[seed] = next_id
        queue = deque([seed])
        while queue:
            p = queue.popleft()
            for q in neighbours[p]:
                if labels[q] == NOISE:
                    labels[q] = next_id
                    if core[q]:
                        queue.append(q)
        next_id += 1
    return ClusterAssignment.from_labels(labels.tolist())


def filter_largest(samples: Sequence[T], assignment: ClusterAssignment) -> tuple[list[T], bool]:
    """Samples in the largest cluster, in input order, plus a filtered flag.

    When every point is noise the input is returned unchanged with the
    flag set to ``False``.
    """
    if len(samples) != len(assignment.labels):
        raise ValueError(f"{len(samples)} samples but {len(assignment.labels)} labels")
    if assignment.largest_cluster is None:
        return list(samples), False
    keep = assignment.largest_cluster
    return [s for s, lab in zip(samples, assignment.labels) if lab == keep], True


def diameter(points: np.ndarray) -> float:
    """Largest pairwise Euclidean distance."""
    x = np.asarray(points, dtype=np.float64)
    if len(x) < 2:
        return 0.0
    sq = np.sum(x**2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2 * x @ x.T
    return float(np.sqrt(max(d2.max(), 0.0)))
