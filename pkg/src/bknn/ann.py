"""Approximate nearest-neighbor search over the full datastore: an inverted
file of k-means clusters, optionally with product-quantized posting lists.

Training is Lloyd's algorithm with k-means++ seeding and a fixed RNG seed:
at most 25 iterations, stopping early when the relative inertia change drops
below 1e-4.  Queries probe the ``n_probe`` posting lists with the nearest
centroids; with quantization off the scan is exact over the probed lists,
with it on distances are asymmetric (query exact, database coded against
per-subspace residual codebooks).  Probing every list with quantization off
degenerates to exact search.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import blockio
from .datastore import Datastore
from .errors import DataFormatError
from .knn import Neighbor, distances_to

MAGIC = b"BKNNIVF\x00"
VERSION = 1

KMEANS_MAX_ITER = 25
KMEANS_TOL = 1e-4
_POPULATE_CHUNK = 8192


@dataclass(frozen=True)
class IvfConfig:
    n_clusters: int = 256
    n_probe: int = 8
    training_sample: int = 1_000_000
    pq_enabled: bool = False
    pq_m: int = 16
    pq_bits: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        if not 1 <= self.n_probe <= self.n_clusters:
            raise ValueError(
                f"n_probe must be in [1, n_clusters], got {self.n_probe}")
        if self.pq_enabled:
            if self.pq_bits != 8:
                raise ValueError("only 8-bit PQ codes are supported")
            if self.pq_m < 1:
                raise ValueError("pq_m must be >= 1")

    def to_dict(self) -> dict:
        return {"n_clusters": self.n_clusters, "n_probe": self.n_probe,
                "training_sample": self.training_sample,
                "pq_enabled": self.pq_enabled, "pq_m": self.pq_m,
                "pq_bits": self.pq_bits, "seed": self.seed}

    @classmethod
    def from_dict(cls, raw: dict) -> "IvfConfig":
        return cls(**raw)


# -- k-means -------------------------------------------------------------


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """All-pairs squared distances, clipped at zero against rounding."""
    p2 = (points * points).sum(axis=1)[:, None]
    c2 = (centroids * centroids).sum(axis=1)[None, :]
    d2 = p2 + c2 - 2.0 * (points @ centroids.T)
    return np.maximum(d2, 0.0)


def kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[int(rng.integers(n))]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total > 0.0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centroids[i] = points[idx]
        d2 = np.minimum(d2, ((points - centroids[i]) ** 2).sum(axis=1))
    return centroids


def lloyd(points: np.ndarray, k: int, seed: int,
          max_iter: int = KMEANS_MAX_ITER,
          tol: float = KMEANS_TOL) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Lloyd iterations with k-means++ seeding.

    Returns (centroids, assignment, per-iteration inertia history).  If the
    points hold fewer than ``k`` distinct rows, the distinct rows themselves
    become the centroids (inertia 0).
    """
    points = np.asarray(points, dtype=np.float64)
    unique = np.unique(points, axis=0)
    if len(unique) <= k:
        centroids = unique
        assign = np.argmin(_sq_dists(points, centroids), axis=1)
        return centroids, assign, [0.0]
    rng = np.random.default_rng(seed)
    centroids = kmeans_pp_init(points, k, rng)
    history: list[float] = []
    assign = np.zeros(len(points), dtype=np.int64)
    for _ in range(max_iter):
        d2 = _sq_dists(points, centroids)
        assign = np.argmin(d2, axis=1)
        inertia = float(d2[np.arange(len(points)), assign].sum())
        history.append(inertia)
        if len(history) >= 2:
            prev = history[-2]
            if prev == 0.0 or (prev - inertia) / prev < tol:
                break
        new_centroids = np.empty_like(centroids)
        empty: list[int] = []
        for c in range(k):
            members = points[assign == c]
            if len(members):
                new_centroids[c] = members.mean(axis=0)
            else:
                empty.append(c)
        if empty:
            # reseed each empty cluster at the currently worst-served point
            own = d2[np.arange(len(points)), assign].copy()
            for c in empty:
                idx = int(np.argmax(own))
                new_centroids[c] = points[idx]
                own[idx] = -1.0
        centroids = new_centroids
    return centroids, assign, history


# -- the index -------------------------------------------------------------


class IvfIndex:

    def __init__(self, config: IvfConfig, dim: int, centroids: np.ndarray,
                 codebooks: np.ndarray | None = None,
                 pq_train_max_err: np.ndarray | None = None,
                 train_inertia: list[float] | None = None):
        self.config = config
        self.dim = dim
        self.centroids = centroids.astype(np.float32)     # (n_lists, dim)
        self.codebooks = codebooks                        # (m, 256, dim/m) f32
        self.pq_train_max_err = pq_train_max_err          # (m,) f64
        self.train_inertia = train_inertia or []
        self.lists_ids: list[np.ndarray] | None = None    # per list, int64
        self.lists_keys: list[np.ndarray] | None = None   # pq off: per list f32
        self.lists_codes: list[np.ndarray] | None = None  # pq on: per list (n, m) u8

    @property
    def n_lists(self) -> int:
        return len(self.centroids)

    @property
    def populated(self) -> bool:
        return self.lists_ids is not None

    # -- encoding helpers ----------------------------------------------------

    def _subspaces(self, vectors: np.ndarray) -> np.ndarray:
        m = self.config.pq_m
        return vectors.reshape(len(vectors), m, self.dim // m)

    def encode(self, keys: np.ndarray, assign: np.ndarray) -> np.ndarray:
        """PQ-encode keys against the residual codebooks (assignment given)."""
        residuals = keys.astype(np.float64) - self.centroids.astype(np.float64)[assign]
        subs = self._subspaces(residuals)
        codes = np.empty((len(keys), self.config.pq_m), dtype=np.uint8)
        for j in range(self.config.pq_m):
            cb = self.codebooks[j].astype(np.float64)
            codes[:, j] = np.argmin(_sq_dists(subs[:, j, :], cb), axis=1)
        return codes

    def decode(self, codes: np.ndarray, list_id: int) -> np.ndarray:
        """Reconstruct vectors from PQ codes in a given posting list."""
        m = self.config.pq_m
        parts = [self.codebooks[j][codes[:, j]] for j in range(m)]
        residual = np.concatenate(parts, axis=1).astype(np.float64)
        return residual + self.centroids.astype(np.float64)[list_id]

    # -- persistence -----------------------------------------------------------

    def save(self, path: Path | str) -> None:
        meta = {
            "dim": self.dim,
            "config": self.config.to_dict(),
            "populated": self.populated,
            "n_lists": self.n_lists,
            "train_inertia": self.train_inertia,
        }
        blocks: list[tuple[str, bytes]] = [
            ("meta", json.dumps(meta, sort_keys=True).encode()),
            ("centroids", self.centroids.astype("<f4").tobytes()),
        ]
        if self.codebooks is not None:
            blocks.append(("codebooks", self.codebooks.astype("<f4").tobytes()))
            blocks.append(("pq_train_max_err",
                           self.pq_train_max_err.astype("<f8").tobytes()))
        if self.populated:
            lengths = np.array([len(ids) for ids in self.lists_ids], dtype="<i8")
            blocks.append(("list_lengths", lengths.tobytes()))
            blocks.append(("list_ids",
                           np.concatenate(self.lists_ids).astype("<i8").tobytes()
                           if len(lengths) else b""))
            if self.config.pq_enabled:
                payload = (np.concatenate(self.lists_codes).astype("u1").tobytes()
                           if any(len(c) for c in self.lists_codes) else b"")
                blocks.append(("list_codes", payload))
            else:
                payload = (np.concatenate(self.lists_keys).astype("<f4").tobytes()
                           if any(len(k) for k in self.lists_keys) else b"")
                blocks.append(("list_keys", payload))
        blockio.write_blocks(Path(path), MAGIC, VERSION, blocks)

    @classmethod
    def load(cls, path: Path | str) -> "IvfIndex":
        blocks = blockio.read_blocks(Path(path), MAGIC, VERSION)
        meta = json.loads(blockio.require(blocks, "meta", path))
        config = IvfConfig.from_dict(meta["config"])
        dim = meta["dim"]
        n_lists = meta["n_lists"]
        centroids = np.frombuffer(blockio.require(blocks, "centroids", path),
                                  dtype="<f4").reshape(n_lists, dim)
        codebooks = None
        max_err = None
        if "codebooks" in blocks:
            dsub = dim // config.pq_m
            codebooks = np.frombuffer(blocks["codebooks"], dtype="<f4").reshape(
                config.pq_m, 256, dsub)
            max_err = np.frombuffer(blocks["pq_train_max_err"], dtype="<f8").copy()
        index = cls(config, dim, centroids.copy(), codebooks,
                    max_err, meta["train_inertia"])
        if meta["populated"]:
            lengths = np.frombuffer(blockio.require(blocks, "list_lengths", path),
                                    dtype="<i8")
            ids_flat = np.frombuffer(blockio.require(blocks, "list_ids", path),
                                     dtype="<i8")
            bounds = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
            index.lists_ids = [ids_flat[bounds[i]:bounds[i + 1]].copy()
                               for i in range(n_lists)]
            if config.pq_enabled:
                codes_flat = np.frombuffer(blocks["list_codes"], dtype="u1").reshape(
                    -1, config.pq_m)
                index.lists_codes = [codes_flat[bounds[i]:bounds[i + 1]].copy()
                                     for i in range(n_lists)]
            else:
                keys_flat = np.frombuffer(blocks["list_keys"], dtype="<f4").reshape(-1, dim)
                index.lists_keys = [keys_flat[bounds[i]:bounds[i + 1]].copy()
                                    for i in range(n_lists)]
        return index


def train(store: Datastore, config: IvfConfig) -> IvfIndex:
    """Train centroids (and PQ codebooks) on a uniform sample of keys."""
    if store.record_count == 0:
        raise DataFormatError("cannot train an index on an empty datastore")
    if config.pq_enabled and store.dim % config.pq_m != 0:
        raise DataFormatError(
            f"dim {store.dim} not divisible by pq_m {config.pq_m}")
    rng = np.random.default_rng(config.seed)
    if store.record_count > config.training_sample:
        sample_ids = np.sort(rng.choice(store.record_count, config.training_sample,
                                        replace=False))
        sample = np.asarray(store.records["key"][sample_ids], dtype=np.float64)
    else:
        sample = np.asarray(store.records["key"], dtype=np.float64)
    centroids, assign, history = lloyd(sample, config.n_clusters, config.seed)
    if len(centroids) < config.n_clusters:
        config = replace(config, n_clusters=len(centroids),
                         n_probe=min(config.n_probe, len(centroids)))
    index = IvfIndex(config, store.dim, centroids, train_inertia=history)
    if config.pq_enabled:
        dsub = store.dim // config.pq_m
        # codebooks are trained on residuals against the (f32) stored centroids
        residuals = sample - index.centroids.astype(np.float64)[
            np.argmin(_sq_dists(sample, index.centroids.astype(np.float64)), axis=1)]
        subs = residuals.reshape(len(sample), config.pq_m, dsub)
        codebooks = np.empty((config.pq_m, 256, dsub), dtype=np.float32)
        max_err = np.empty(config.pq_m, dtype=np.float64)
        for j in range(config.pq_m):
            cb, cb_assign, _ = lloyd(subs[:, j, :], 256, config.seed + 1 + j)
            if len(cb) < 256:
                cb = np.concatenate([cb, np.repeat(cb[:1], 256 - len(cb), axis=0)])
            codebooks[j] = cb.astype(np.float32)
            errs = np.linalg.norm(
                subs[:, j, :] - codebooks[j].astype(np.float64)[
                    np.argmin(_sq_dists(subs[:, j, :],
                                        codebooks[j].astype(np.float64)), axis=1)],
                axis=1)
            max_err[j] = float(errs.max())
        index.codebooks = codebooks
        index.pq_train_max_err = max_err
    return index


def populate(index: IvfIndex, store: Datastore) -> IvfIndex:
    """Insert every record into its nearest-centroid posting list."""
    if index.populated:
        raise DataFormatError("index is already populated")
    if store.dim != index.dim:
        raise DataFormatError(
            f"store dim {store.dim} does not match index dim {index.dim}")
    centroids = index.centroids.astype(np.float64)
    parts_ids: list[list[np.ndarray]] = [[] for _ in range(index.n_lists)]
    parts_payload: list[list[np.ndarray]] = [[] for _ in range(index.n_lists)]
    for start in range(0, store.record_count, _POPULATE_CHUNK):
        stop = min(start + _POPULATE_CHUNK, store.record_count)
        keys = np.asarray(store.records["key"][start:stop])
        assign = np.argmin(_sq_dists(keys.astype(np.float64), centroids), axis=1)
        codes = index.encode(keys, assign) if index.config.pq_enabled else None
        for c in np.unique(assign):
            mask = assign == c
            parts_ids[c].append(np.arange(start, stop, dtype=np.int64)[mask])
            parts_payload[c].append(codes[mask] if codes is not None else keys[mask])
    index.lists_ids = [np.concatenate(p) if p else np.empty(0, dtype=np.int64)
                       for p in parts_ids]
    if index.config.pq_enabled:
        index.lists_codes = [
            np.concatenate(p) if p else np.empty((0, index.config.pq_m), dtype=np.uint8)
            for p in parts_payload]
    else:
        index.lists_keys = [
            np.concatenate(p) if p else np.empty((0, index.dim), dtype=np.float32)
            for p in parts_payload]
    return index


def ann_search(index: IvfIndex, store: Datastore, query: np.ndarray, k: int,
               n_probe: int | None = None) -> list[Neighbor]:
    """Scan the ``n_probe`` posting lists nearest to the query and return the
    k best records, ordered by (distance, record id)."""
    if not index.populated:
        raise DataFormatError("index is not populated")
    query = np.asarray(query)
    if query.shape != (index.dim,):
        raise DataFormatError(
            f"query dimension {query.shape} does not match index dim {index.dim}")
    n_probe = index.config.n_probe if n_probe is None else n_probe
    n_probe = min(n_probe, index.n_lists)
    cd = distances_to(query, index.centroids)
    probe = np.lexsort((np.arange(index.n_lists), cd))[:n_probe]
    ids_parts = []
    dist_parts = []
    for c in probe:
        ids = index.lists_ids[c]
        if not len(ids):
            continue
        if index.config.pq_enabled:
            rq = query.astype(np.float64) - index.centroids.astype(np.float64)[c]
            subs = rq.reshape(index.config.pq_m, -1)
            codes = index.lists_codes[c]
            d2 = np.zeros(len(ids), dtype=np.float64)
            for j in range(index.config.pq_m):
                table = ((index.codebooks[j].astype(np.float64)
                          - subs[j][None, :]) ** 2).sum(axis=1)
                d2 += table[codes[:, j]]
            dist = np.sqrt(d2)
        else:
            dist = distances_to(query, index.lists_keys[c])
        ids_parts.append(ids)
        dist_parts.append(dist)
    if not ids_parts:
        return []
    ids = np.concatenate(ids_parts)
    dists = np.concatenate(dist_parts)
    order = np.lexsort((ids, dists))[:k]
    out = []
    for idx in order:
        rid = int(ids[idx])
        row = store.records[rid]
        out.append(Neighbor(record_id=rid, token_id=int(row["token_id"]),
                            doc_id=int(row["doc_id"]), distance=float(dists[idx])))
    return out
