"""Cloze evaluation harness: dataset ingestion, template instantiation,
precision-at-r with two-stage averaging (within each relation, then across
relations), mode ablations, and the hyperparameter grid search.
"""

from __future__ import annotations

import dataclasses
import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from . import ir_index as ir_mod
from .embedder import DEFAULT_MASK_TOKEN
from .errors import DataFormatError
from .knn import KnnConfig, knn, neighbors_to_distribution
from .pipeline import (
    Artifacts,
    ClozeQuery,
    InterpolationConfig,
    answer,
    interpolate,
    mode_lambda,
    parse_cloze_text,
    rank,
    restrict_to_candidates,
)

R_VALUES = (1, 5, 10)

_X_RE = re.compile(r"(?<![A-Za-z0-9])X(?![A-Za-z0-9])")
_Y_RE = re.compile(r"(?<![A-Za-z0-9])Y(?![A-Za-z0-9])")


@dataclass(frozen=True)
class FactTriple:
    subject: str
    relation: str
    obj: str
    template: str

    def __post_init__(self):
        if len(_X_RE.findall(self.template)) != 1 or len(_Y_RE.findall(self.template)) != 1:
            raise DataFormatError(
                f"template must contain X exactly once and Y exactly once: "
                f"{self.template!r}")


def instantiate(fact: FactTriple, query_id: str | None = None,
                mask_token: str = DEFAULT_MASK_TOKEN) -> ClozeQuery:
    """Substitute the subject for X and the mask for Y; the object becomes the
    gold answer and must be a single token after normalization."""
    from .corpus import normalize, tokenize
    mask = mask_token
    gold_tokens = tokenize(normalize(fact.obj))
    if len(gold_tokens) != 1:
        raise DataFormatError(
            f"answer {fact.obj!r} is not a single token ({gold_tokens})")
    text = _X_RE.sub(lambda _: fact.subject, fact.template, count=1)
    text = _Y_RE.sub(lambda _: mask, text, count=1)
    return parse_cloze_text(text, subject=fact.subject, relation=fact.relation,
                            gold_answer=gold_tokens[0], query_id=query_id,
                            mask_token=mask)


@dataclass
class Dataset:
    queries: list[ClozeQuery]
    rejected: int = 0          # rows dropped at ingestion (multi-token answers)


def load_dataset(path: Path | str) -> Dataset:
    """Read a JSON-lines dataset.  Rows are either fact triples
    {"relation", "subject", "object", "template"} or pre-instantiated queries
    {"query_id", "masked_text", "answer", "relation"}; multi-token answers are
    rejected and counted."""
    from .corpus import normalize, tokenize
    queries: list[ClozeQuery] = []
    rejected = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{lineno}: bad JSON: {exc}") from exc
            try:
                if "template" in row:
                    fact = FactTriple(subject=row["subject"], relation=row["relation"],
                                      obj=row["object"], template=row["template"])
                    queries.append(instantiate(fact, query_id=f"q{lineno:06d}"))
                elif "masked_text" in row:
                    gold = row.get("answer")
                    if gold is not None and len(tokenize(normalize(gold))) != 1:
                        rejected += 1
                        continue
                    queries.append(parse_cloze_text(
                        row["masked_text"],
                        subject=row.get("subject"),
                        relation=row.get("relation"),
                        gold_answer=gold,
                        query_id=row["query_id"]))
                else:
                    raise DataFormatError(
                        f"{path}:{lineno}: row is neither a fact triple nor a query")
            except DataFormatError as exc:
                if "not a single token" in str(exc):
                    rejected += 1
                    continue
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
            except KeyError as exc:
                raise DataFormatError(f"{path}:{lineno}: missing field {exc}") from exc
    return Dataset(queries=queries, rejected=rejected)


def check_disjoint(dev: Iterable[ClozeQuery], test: Iterable[ClozeQuery]) -> None:
    """Dev/test hygiene: no query id may appear in both sets."""
    dev_ids = {q.query_id for q in dev}
    overlap = sorted(qid for q in test if (qid := q.query_id) in dev_ids)
    if overlap:
        raise DataFormatError(
            f"dev and test sets share {len(overlap)} query ids, e.g. {overlap[:5]}")


# -- metrics -----------------------------------------------------------------


def precision_at(ranking: Sequence[int], gold: int, r: int) -> int:
    """1 if the gold token appears in the first r entries, else 0."""
    if r < 1:
        raise ValueError(f"r must be >= 1, got {r}")
    return 1 if gold in ranking[:r] else 0


def mean_precision(hits_by_relation: Mapping[str, Sequence[int]]) -> float:
    """Average within each relation, then across relations (unweighted)."""
    means = [sum(hits) / len(hits) for hits in hits_by_relation.values() if len(hits)]
    if not means:
        raise ValueError("no relation has any queries")
    return sum(means) / len(means)


# -- reports -----------------------------------------------------------------


@dataclass
class RelationReport:
    query_count: int
    excluded: int
    p_at: dict[int, float]


@dataclass
class EvalReport:
    mode: str
    ir_enabled: bool
    relations: dict[str, RelationReport]
    means: dict[int, float]
    query_count: int
    excluded: int
    empty_knn_count: int
    errors: list[str] = field(default_factory=list)

    def results(self) -> dict:
        """Everything except the mode/routing labels, for equality checks."""
        return {
            "relations": {rel: dataclasses.asdict(r) for rel, r in self.relations.items()},
            "means": dict(self.means),
            "query_count": self.query_count,
            "excluded": self.excluded,
            "errors": list(self.errors),
        }

    def to_dict(self) -> dict:
        return {"mode": self.mode, "ir_enabled": self.ir_enabled,
                "empty_knn_count": self.empty_knn_count, **self.results()}

    def format_table(self) -> str:
        lines = [f"{'relation':<28} {'P@1':>7} {'P@5':>7} {'P@10':>7} {'n':>6}"]
        for rel in sorted(self.relations):
            r = self.relations[rel]
            lines.append(f"{rel:<28} {r.p_at[1]:>7.3f} {r.p_at[5]:>7.3f} "
                         f"{r.p_at[10]:>7.3f} {r.query_count:>6}")
        lines.append(f"{'mean':<28} {self.means[1]:>7.3f} {self.means[5]:>7.3f} "
                     f"{self.means[10]:>7.3f} {self.query_count:>6}")
        return "\n".join(lines)


def _relation_key(query: ClozeQuery) -> str:
    return query.relation if query.relation is not None else "_none"


def evaluate(queries: Sequence[ClozeQuery], artifacts: Artifacts, mode: str,
             ir_enabled: bool = True, threads: int = 1) -> EvalReport:
    """Run the mode's pipeline over every query and assemble the report.
    Queries whose gold answer is missing or outside the candidate vocabulary
    are excluded and counted; other per-query errors are recorded, not fatal."""
    hits: dict[str, dict[int, list[int]]] = {}
    excluded: dict[str, int] = {}
    errors: list[str] = []
    empty_knn = 0
    knn_leg_ran = mode_lambda(mode, artifacts.interp) != 0.0

    def run(query: ClozeQuery):
        gold = (artifacts.candidates.id_of(query.gold_answer)
                if query.gold_answer is not None else None)
        if gold is None:
            return ("excluded", query, None)
        try:
            result = answer(query, artifacts, mode=mode, ir_enabled=ir_enabled)
        except DataFormatError as exc:
            return ("error", query, str(exc))
        ranking = [tid for tid, _ in result.ranking]
        row = {r: precision_at(ranking, gold, r) for r in R_VALUES}
        was_empty = knn_leg_ran and not result.p_knn
        return ("ok", query, (row, was_empty))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(run, queries))
    else:
        outcomes = [run(q) for q in queries]

    for status, query, payload in outcomes:
        rel = _relation_key(query)
        if status == "excluded":
            excluded[rel] = excluded.get(rel, 0) + 1
        elif status == "error":
            excluded[rel] = excluded.get(rel, 0) + 1
            errors.append(f"{query.query_id}: {payload}")
        else:
            row, was_empty = payload
            slot = hits.setdefault(rel, {r: [] for r in R_VALUES})
            for r in R_VALUES:
                slot[r].append(row[r])
            empty_knn += was_empty

    relations = {}
    for rel in sorted(set(hits) | set(excluded)):
        slot = hits.get(rel, {r: [] for r in R_VALUES})
        n = len(slot[R_VALUES[0]])
        p_at = {r: (sum(slot[r]) / n if n else 0.0) for r in R_VALUES}
        relations[rel] = RelationReport(query_count=n,
                                        excluded=excluded.get(rel, 0), p_at=p_at)
    if not hits:
        raise DataFormatError("no evaluable queries (all excluded)")
    means = {r: mean_precision({rel: slot[r] for rel, slot in hits.items()})
             for r in R_VALUES}
    return EvalReport(mode=mode, ir_enabled=ir_enabled, relations=relations,
                      means=means, query_count=sum(len(s[1]) for s in hits.values()),
                      excluded=sum(excluded.values()), empty_knn_count=empty_knn,
                      errors=errors)


# -- grid search ----------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    n_values: tuple[int, ...] = (1, 2, 3, 4, 5)
    lambdas: tuple[float, ...] = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
    k_values: tuple[int, ...] = (64, 128, 512)
    l_values: tuple[float, ...] = (5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0)

    def __post_init__(self):
        if not (self.n_values and self.lambdas and self.k_values and self.l_values):
            raise ValueError("grid must be non-empty in every dimension")

    @property
    def size(self) -> int:
        return (len(self.n_values) * len(self.lambdas)
                * len(self.k_values) * len(self.l_values))


@dataclass(frozen=True)
class GridPoint:
    n: int
    lam: float
    k: int
    l: float


@dataclass
class GridSearchResult:
    best: GridPoint
    best_p_at_1: float
    cells: list[dict]
    query_count: int
    excluded: int

    def to_dict(self) -> dict:
        return {
            "best": {"n": self.best.n, "lambda": self.best.lam,
                     "k": self.best.k, "l": self.best.l,
                     "p_at_1": self.best_p_at_1},
            "cells": self.cells,
            "query_count": self.query_count,
            "excluded": self.excluded,
        }


def grid_search(queries: Sequence[ClozeQuery], artifacts: Artifacts,
                spec: GridSpec = GridSpec()) -> GridSearchResult:
    """Exhaustive search over (N, lambda, k, l) by mean P@1 on the dev set.

    Per query, retrieval runs once at the largest N and the neighbor list is
    computed once at the largest k; smaller values reuse prefixes, which is
    equivalent to naive recomputation because both rankings are sorted with
    the same tie rules.  Ties between cells break toward smaller N, smaller
    k, lambda closest to 0.5, then smaller l.
    """
    max_n = max(spec.n_values)
    max_k = max(spec.k_values)
    probe_config = KnnConfig(k=max_k, scale=spec.l_values[0])
    hits: dict[GridPoint, dict[str, list[int]]] = {
        GridPoint(n, lam, k, l): {}
        for n in spec.n_values for lam in spec.lambdas
        for k in spec.k_values for l in spec.l_values}
    excluded = 0
    evaluated = 0
    for query in queries:
        gold = (artifacts.candidates.id_of(query.gold_answer)
                if query.gold_answer is not None else None)
        if gold is None:
            excluded += 1
            continue
        evaluated += 1
        rel = _relation_key(query)
        p_lm = artifacts.lm.predict(query, artifacts.candidates)
        ranked_docs = ir_mod.retrieve_ranked(artifacts.ir, query,
                                             artifacts.ir_config, max_n)
        embedding = (artifacts.query_embedder.embed(query) if ranked_docs else None)
        for n in spec.n_values:
            docs = ranked_docs[:n]
            if docs:
                ranges = artifacts.store.slice(docs)
                neighbors_full = knn(embedding, artifacts.store, ranges, probe_config)
            else:
                neighbors_full = []
            for k in spec.k_values:
                nb = neighbors_full[:k]
                for l in spec.l_values:
                    p_knn = restrict_to_candidates(
                        neighbors_to_distribution(nb, KnnConfig(k=k, scale=l)),
                        artifacts.candidates)
                    for lam in spec.lambdas:
                        final = interpolate(p_knn, p_lm, lam)
                        top = min(final.items(), key=lambda kv: (-kv[1], kv[0]))[0]
                        point = GridPoint(n, lam, k, l)
                        hits[point].setdefault(rel, []).append(1 if top == gold else 0)
    if not evaluated:
        raise DataFormatError("no evaluable queries in the dev set")
    cells = []
    for n in spec.n_values:
        for lam in spec.lambdas:
            for k in spec.k_values:
                for l in spec.l_values:
                    point = GridPoint(n, lam, k, l)
                    p1 = mean_precision(hits[point])
                    cells.append({"n": n, "lambda": lam, "k": k, "l": l, "p_at_1": p1})
    best_cell = min(cells, key=lambda c: (-c["p_at_1"], c["n"], c["k"],
                                          abs(c["lambda"] - 0.5), c["l"]))
    best = GridPoint(best_cell["n"], best_cell["lambda"], best_cell["k"], best_cell["l"])
    return GridSearchResult(best=best, best_p_at_1=best_cell["p_at_1"], cells=cells,
                            query_count=evaluated, excluded=excluded)


def evaluate_cell(queries: Sequence[ClozeQuery], artifacts: Artifacts,
                  point: GridPoint) -> float:
    """Naive recomputation of one grid cell: rebuild the configs and run the
    full pipeline per query.  Used to cross-check the staged grid search."""
    arts = dataclasses.replace(
        artifacts,
        knn_config=KnnConfig(k=point.k, scale=point.l),
        ir_config=dataclasses.replace(artifacts.ir_config, top_n=point.n),
        interp=InterpolationConfig(lam=point.lam))
    report = evaluate(queries, arts, mode="interpolated")
    return report.means[1]
