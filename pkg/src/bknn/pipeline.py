"""End-to-end inference: cloze queries, LM predictors, the retrieval-sliced
kNN distribution, and the final interpolation.

All distributions are plain dicts mapping token ids of the candidate
vocabulary to probabilities.  The interpolation is computed in probability
space: ``lam * p_knn + (1 - lam) * p_lm``; when the kNN side produced no
evidence the LM distribution is returned unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import ann as ann_mod
from . import ir_index as ir_mod
from .corpus import Vocabulary, normalize, tokenize
from .datastore import Datastore
from .embedder import DEFAULT_MASK_TOKEN, ReferenceEmbedder, embed_query
from .errors import DataFormatError
from .knn import KnnConfig, Neighbor, knn, neighbors_to_distribution


@dataclass(frozen=True)
class InterpolationConfig:
    lam: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"interpolation weight must be in [0, 1], got {self.lam}")


@dataclass(frozen=True)
class ClozeQuery:
    tokens: tuple[str, ...]
    subject: str | None = None
    relation: str | None = None
    gold_answer: str | None = None
    query_id: str | None = None
    mask_token: str = DEFAULT_MASK_TOKEN

    def __post_init__(self):
        count = sum(1 for t in self.tokens if t == self.mask_token)
        if count != 1:
            raise DataFormatError(
                f"cloze query must contain exactly one {self.mask_token!r}, "
                f"found {count}: {' '.join(self.tokens)!r}")

    @property
    def mask_position(self) -> int:
        return self.tokens.index(self.mask_token)


def parse_cloze_text(raw: str, *, subject: str | None = None,
                     relation: str | None = None, gold_answer: str | None = None,
                     query_id: str | None = None,
                     mask_token: str = DEFAULT_MASK_TOKEN) -> ClozeQuery:
    """Build a query from raw text containing the mask marker once.  The text
    around the marker is normalized and tokenized; the marker itself is kept
    verbatim as the reserved mask token."""
    parts = raw.split(mask_token)
    if len(parts) != 2:
        raise DataFormatError(
            f"query text must contain exactly one {mask_token!r}, "
            f"found {len(parts) - 1}: {raw!r}")
    tokens = tokenize(normalize(parts[0])) + [mask_token] + tokenize(normalize(parts[1]))
    gold = normalize(gold_answer) if gold_answer is not None else None
    return ClozeQuery(tokens=tuple(tokens), subject=subject, relation=relation,
                      gold_answer=gold, query_id=query_id, mask_token=mask_token)


class CandidateVocabulary:
    """The token subset over which LM and kNN distributions are compared."""

    def __init__(self, ids: Sequence[int], vocab: Vocabulary):
        if not ids:
            raise DataFormatError("candidate vocabulary is empty")
        self.ids = tuple(ids)
        self.vocab = vocab
        self._id_set = frozenset(ids)
        if len(self._id_set) != len(self.ids):
            raise DataFormatError("candidate vocabulary has duplicate tokens")

    def __contains__(self, token_id: int) -> bool:
        return token_id in self._id_set

    def __len__(self) -> int:
        return len(self.ids)

    def surface(self, token_id: int) -> str:
        return self.vocab.surface(token_id)

    def id_of(self, surface: str) -> int | None:
        tid = self.vocab.id_of(surface)
        return tid if tid in self._id_set else None

    @classmethod
    def from_file(cls, path: Path | str, vocab: Vocabulary) -> "CandidateVocabulary":
        ids = []
        for lineno, line in enumerate(Path(path).read_text("utf-8").splitlines(), 1):
            surface = line.strip()
            if not surface:
                continue
            tid = vocab.id_of(surface)
            if tid is None:
                raise DataFormatError(
                    f"{path}:{lineno}: candidate {surface!r} is not in the shared vocabulary")
            ids.append(tid)
        return cls(ids, vocab)

    def save(self, path: Path | str) -> None:
        Path(path).write_text(
            "".join(self.vocab.surface(t) + "\n" for t in self.ids), "utf-8")


def check_distribution(probs: dict[int, float], tol: float = 1e-6) -> None:
    """Assert the distribution invariants: entries in [0, 1], total 1 (or empty)."""
    if not probs:
        return
    total = 0.0
    for tid, p in probs.items():
        if not 0.0 <= p <= 1.0 + tol:
            raise DataFormatError(f"probability out of range for token {tid}: {p}")
        total += p
    if abs(total - 1.0) > tol:
        raise DataFormatError(f"distribution sums to {total}, expected 1")


# -- LM predictors -----------------------------------------------------------


class LmPredictor(Protocol):
    def predict(self, query: ClozeQuery,
                candidates: CandidateVocabulary) -> dict[int, float]: ...


class StubLm:
    """Deterministic reference predictor: unigram counts over the candidate
    vocabulary, smoothed by how often a candidate shares a sentence with the
    query's context tokens.  With no corpus statistics it is the uniform
    maximum-entropy fallback."""

    def __init__(self, unigrams: dict[int, int] | None = None,
                 cooccurrence: dict[int, dict[str, int]] | None = None):
        self.unigrams = unigrams or {}
        self.cooccurrence = cooccurrence or {}

    @classmethod
    def from_corpus(cls, corpus, candidates: CandidateVocabulary) -> "StubLm":
        unigrams: dict[int, int] = {}
        cooc: dict[int, dict[str, int]] = {}
        for doc in corpus.documents:
            for sent in doc.sentences:
                present = set(sent.tokens)
                cand_here = [t for t in present if t in candidates]
                for tid in sent.tokens:
                    if tid in candidates:
                        unigrams[tid] = unigrams.get(tid, 0) + 1
                surfaces = {corpus.vocab.surface(t) for t in present}
                for tid in cand_here:
                    slot = cooc.setdefault(tid, {})
                    for s in surfaces:
                        slot[s] = slot.get(s, 0) + 1
        return cls(unigrams, cooc)

    def predict(self, query: ClozeQuery,
                candidates: CandidateVocabulary) -> dict[int, float]:
        context = [t for t in query.tokens if t != query.mask_token]
        total_unigrams = sum(self.unigrams.get(t, 0) for t in candidates.ids)
        scores = []
        for tid in candidates.ids:
            s = 1.0
            if total_unigrams:
                s += self.unigrams.get(tid, 0) / total_unigrams
            slot = self.cooccurrence.get(tid)
            if slot:
                s += sum(slot.get(t, 0) for t in context)
            scores.append(s)
        total = sum(scores)
        return {tid: s / total for tid, s in zip(candidates.ids, scores)}


class ImportedLm:
    """Predictions produced externally, one JSON line per query:
    {"query_id": ..., "probs": [[surface, probability], ...]}.  Restricted to
    the candidate vocabulary and renormalized on load."""

    def __init__(self, rows: dict[str, list[tuple[str, float]]]):
        self.rows = rows

    @classmethod
    def load(cls, path: Path | str) -> "ImportedLm":
        rows: dict[str, list[tuple[str, float]]] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                    rows[row["query_id"]] = [(s, float(p)) for s, p in row["probs"]]
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise DataFormatError(f"{path}:{lineno}: bad prediction row: {exc}") from exc
        return cls(rows)

    def predict(self, query: ClozeQuery,
                candidates: CandidateVocabulary) -> dict[int, float]:
        if query.query_id is None or query.query_id not in self.rows:
            raise DataFormatError(
                f"query id {query.query_id!r} missing from imported predictions")
        raw = {}
        for surface, p in self.rows[query.query_id]:
            tid = candidates.id_of(normalize(surface))
            if tid is not None:
                raw[tid] = raw.get(tid, 0.0) + p
        total = sum(raw.values())
        if total <= 0.0:
            raise DataFormatError(
                f"imported predictions for {query.query_id!r} put no mass on the "
                "candidate vocabulary")
        return {tid: p / total for tid, p in raw.items()} | {
            tid: 0.0 for tid in candidates.ids if tid not in raw}


# -- query embeddings ---------------------------------------------------------


class QueryEmbeddingSource(Protocol):
    def embed(self, query: ClozeQuery) -> np.ndarray: ...


class ReferenceQueryEmbedder:
    def __init__(self, embedder: ReferenceEmbedder):
        self.embedder = embedder

    def embed(self, query: ClozeQuery) -> np.ndarray:
        return embed_query(query.tokens, self.embedder)


class ImportedQueryEmbeddings:
    """Query embeddings shipped in the datastore exchange format, mapped to
    query ids through the manifest's ``query_ids`` list."""

    def __init__(self, store: Datastore):
        query_ids = store.manifest.get("query_ids")
        if not query_ids or len(query_ids) != store.record_count:
            raise DataFormatError(
                f"{store.path}: not a query-embedding exchange file "
                "(manifest lacks a matching query_ids list)")
        self.store = store
        self.by_id = {qid: i for i, qid in enumerate(query_ids)}

    def embed(self, query: ClozeQuery) -> np.ndarray:
        idx = self.by_id.get(query.query_id)
        if idx is None:
            raise DataFormatError(
                f"query id {query.query_id!r} missing from imported query embeddings")
        return np.array(self.store.records[idx]["key"])


# -- the pipeline ------------------------------------------------------------


@dataclass
class Artifacts:
    """Everything a query needs.  ``ir`` may be None when every query routes
    through the ANN index (retrieval-free search); ann_index vice versa."""
    store: Datastore
    ir: ir_mod.InvertedIndex | None
    query_embedder: QueryEmbeddingSource
    lm: LmPredictor
    candidates: CandidateVocabulary
    knn_config: KnnConfig = field(default_factory=KnnConfig)
    ir_config: ir_mod.IrQueryConfig = field(default_factory=ir_mod.IrQueryConfig)
    interp: InterpolationConfig = field(default_factory=InterpolationConfig)
    ann_index: ann_mod.IvfIndex | None = None


def restrict_to_candidates(probs: dict[int, float],
                           candidates: CandidateVocabulary) -> dict[int, float]:
    """Drop non-candidate tokens and renormalize; empty if no mass survives."""
    kept = {tid: p for tid, p in probs.items() if tid in candidates}
    total = sum(kept.values())
    if total <= 0.0:
        return {}
    return {tid: p / total for tid, p in kept.items()}


def knn_predict(query: ClozeQuery, artifacts: Artifacts,
                ir_enabled: bool = True) -> tuple[dict[int, float], list[int], list[Neighbor]]:
    """Retrieve -> slice -> embed -> search -> distribution, restricted to the
    candidate vocabulary.  Returns (distribution, retrieved doc ids, neighbors);
    the distribution is empty when retrieval or the slice produced nothing."""
    if ir_enabled:
        if artifacts.ir is None:
            raise DataFormatError("retrieval requires an IR index")
        doc_ids = ir_mod.retrieve(artifacts.ir, query, artifacts.ir_config)
        if not doc_ids:
            return {}, [], []
        ranges = artifacts.store.slice(doc_ids)
        embedding = artifacts.query_embedder.embed(query)
        neighbors = knn(embedding, artifacts.store, ranges, artifacts.knn_config)
    else:
        if artifacts.ann_index is None:
            raise DataFormatError("retrieval-free search requires an ANN index")
        doc_ids = []
        embedding = artifacts.query_embedder.embed(query)
        neighbors = ann_mod.ann_search(artifacts.ann_index, artifacts.store,
                                       embedding, artifacts.knn_config.k)
    dist = neighbors_to_distribution(neighbors, artifacts.knn_config)
    return restrict_to_candidates(dist, artifacts.candidates), doc_ids, neighbors


def interpolate(p_knn: dict[int, float], p_lm: dict[int, float],
                lam: float) -> dict[int, float]:
    """Pointwise ``lam * p_knn + (1 - lam) * p_lm`` over the LM's support.
    Missing kNN evidence (empty dict) returns the LM distribution exactly."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"interpolation weight must be in [0, 1], got {lam}")
    if not p_knn:
        return dict(p_lm)
    return {tid: lam * p_knn.get(tid, 0.0) + (1.0 - lam) * p
            for tid, p in p_lm.items()}


def rank(probs: dict[int, float]) -> list[tuple[int, float]]:
    """Descending probability, ties by ascending token id."""
    return sorted(probs.items(), key=lambda kv: (-kv[1], kv[0]))


MODES = ("lm", "knn", "interpolated")


def mode_lambda(mode: str, interp: InterpolationConfig) -> float:
    if mode == "lm":
        return 0.0
    if mode == "knn":
        return 1.0
    if mode == "interpolated":
        return interp.lam
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


@dataclass
class AnswerResult:
    ranking: list[tuple[int, float]]       # full candidate vocabulary
    retrieved_docs: list[int]
    neighbors: list[Neighbor]
    p_knn: dict[int, float]
    p_lm: dict[int, float]


def answer(query: ClozeQuery, artifacts: Artifacts, mode: str = "interpolated",
           ir_enabled: bool = True) -> AnswerResult:
    """Rank the candidate vocabulary for a query under the given mode."""
    lam = mode_lambda(mode, artifacts.interp)
    p_lm = artifacts.lm.predict(query, artifacts.candidates)
    if lam == 0.0:
        # pure LM; no retrieval artifacts touched
        return AnswerResult(rank(dict(p_lm)), [], [], {}, p_lm)
    p_knn, doc_ids, neighbors = knn_predict(query, artifacts, ir_enabled)
    final = interpolate(p_knn, p_lm, lam)
    return AnswerResult(rank(final), doc_ids, neighbors, p_knn, p_lm)
