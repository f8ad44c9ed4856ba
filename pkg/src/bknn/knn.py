"""Exact k-nearest-neighbor search over datastore ranges and conversion of
neighbor distances into a token probability distribution.

The distribution weights each neighbor by exp(-(d - d_min) / l) and sums the
weights of all occurrences of a token before normalizing; subtracting the
minimum distance avoids underflow and cancels exactly after normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datastore import Datastore
from .errors import DataFormatError


@dataclass(frozen=True)
class KnnConfig:
    k: int = 128
    scale: float = 6.0      # distance divisor in the softmax

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")


@dataclass(frozen=True)
class Neighbor:
    record_id: int
    token_id: int
    doc_id: int
    distance: float


def distances_to(query: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Euclidean distances from ``query`` to each row of ``keys``, accumulated
    in float64."""
    diff = keys.astype(np.float64) - np.asarray(query, dtype=np.float64)
    return np.sqrt((diff * diff).sum(axis=1))


def knn(query: np.ndarray, store: Datastore, ranges: Sequence[tuple[int, int]],
        config: KnnConfig) -> list[Neighbor]:
    """The k records with smallest Euclidean distance to ``query`` over the
    given ranges; exact, ties broken by record order."""
    query = np.asarray(query)
    if query.shape != (store.dim,):
        raise DataFormatError(
            f"query dimension {query.shape} does not match store dim {store.dim}")
    ids_parts = []
    dist_parts = []
    for first, count in ranges:
        if count == 0:
            continue
        rows = store.records[first:first + count]
        ids_parts.append(np.arange(first, first + count, dtype=np.int64))
        dist_parts.append(distances_to(query, rows["key"]))
    if not ids_parts:
        return []
    ids = np.concatenate(ids_parts)
    dists = np.concatenate(dist_parts)
    order = np.lexsort((ids, dists))[:config.k]
    out = []
    for idx in order:
        rid = int(ids[idx])
        row = store.records[rid]
        out.append(Neighbor(record_id=rid, token_id=int(row["token_id"]),
                            doc_id=int(row["doc_id"]), distance=float(dists[idx])))
    return out


def neighbors_to_distribution(neighbors: Sequence[Neighbor],
                              config: KnnConfig) -> dict[int, float]:
    """Softmax over negative scaled distances, summed per token.

    A token occurring several times accumulates the weight of every
    occurrence.  Empty input yields the empty distribution ("no evidence").
    """
    if not neighbors:
        return {}
    d_min = min(n.distance for n in neighbors)
    weights: dict[int, float] = {}
    total = 0.0
    for n in neighbors:
        w = math.exp(-(n.distance - d_min) / config.scale)
        weights[n.token_id] = weights.get(n.token_id, 0.0) + w
        total += w
    return {tid: w / total for tid, w in weights.items()}
