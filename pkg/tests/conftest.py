"""Shared builders for synthetic corpora and fully wired pipeline artifacts.

Desk-scale worlds use the reference embedder, whose vectors are unit-norm;
distances therefore live in [0, 2] and the distance scale that sharply
separates an exact context match from everything else is small (0.05 here),
unlike the transformer-scale default.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import pytest

from bknn.corpus import CorpusStore
from bknn.datastore import Datastore, build
from bknn.embedder import EmbedderConfig, ReferenceEmbedder
from bknn.ir_index import InvertedIndex, IrQueryConfig, build_index
from bknn.knn import KnnConfig
from bknn.pipeline import (
    Artifacts,
    CandidateVocabulary,
    InterpolationConfig,
    ReferenceQueryEmbedder,
    StubLm,
)

DESK_SCALE = 0.05   # kNN distance scale suited to unit-norm reference embeddings


def synthetic_store(path: Path, keys, token_ids, doc_ids=None) -> Datastore:
    """Write a datastore file directly from raw keys, bypassing the embedder.
    Records group by doc id (ascending); token ids are stored verbatim."""
    import struct
    import zlib

    import numpy as np

    from bknn.datastore import MAGIC, VERSION, _write_manifest, record_dtype

    keys = np.asarray(keys, dtype=np.float32)
    n, dim = keys.shape
    doc_ids = list(doc_ids) if doc_ids is not None else [0] * n
    arr = np.zeros(n, dtype=record_dtype(dim))
    position = {}
    for i in range(n):
        d = doc_ids[i]
        arr[i] = (d, 0, position.get(d, 0), token_ids[i], keys[i])
        position[d] = position.get(d, 0) + 1
    ranges = {}
    crcs = {}
    with open(path, "wb") as fh:
        fh.write(struct.pack("<8sHIQ", MAGIC, VERSION, dim, n))
        cursor = 0
        for d in sorted(set(doc_ids)):
            rows = arr[[i for i in range(n) if doc_ids[i] == d]]
            raw = rows.tobytes()
            fh.write(raw)
            ranges[d] = (cursor, len(rows))
            crcs[d] = zlib.crc32(raw)
            cursor += len(rows)
    _write_manifest(path, dim, n,
                    {"embedder_kind": "reference", "dim": dim,
                     "layer_tag": "synthetic", "mask_token": "[MASK]"},
                    ranges, crcs)
    return Datastore.open(path)


@dataclass
class World:
    """A built pipeline over a synthetic corpus."""
    corpus: CorpusStore
    store: Datastore
    ir: InvertedIndex
    candidates: CandidateVocabulary
    embedder_config: EmbedderConfig
    root: Path

    def artifacts(self, lm=None, knn_config=None, ir_config=None, interp=None,
                  ann_index=None) -> Artifacts:
        return Artifacts(
            store=self.store,
            ir=self.ir,
            query_embedder=ReferenceQueryEmbedder(ReferenceEmbedder(self.embedder_config)),
            lm=lm if lm is not None else StubLm(),
            candidates=self.candidates,
            knn_config=knn_config or KnnConfig(k=128, scale=DESK_SCALE),
            ir_config=ir_config or IrQueryConfig(),
            interp=interp or InterpolationConfig(),
            ann_index=ann_index,
        )


def build_world(root: Path, docs: list[tuple[str, str]], dim: int = 32,
                candidate_surfaces: list[str] | None = None) -> World:
    """Ingest docs, build datastore + IR index, and pick a candidate
    vocabulary (all corpus tokens when none is given)."""
    root.mkdir(parents=True, exist_ok=True)
    corpus = CorpusStore.ingest(docs, root / "corpus")
    config = EmbedderConfig(dim=dim)
    store = build(corpus, config, root / "store.bknnds")
    ir = build_index(corpus)
    ir.save(root / "ir.bknnir")
    if candidate_surfaces is None:
        ids = list(range(len(corpus.vocab)))
    else:
        ids = []
        for s in candidate_surfaces:
            tid = corpus.vocab.id_of(s)
            if tid is None:
                raise AssertionError(f"candidate {s!r} not in the corpus")
            ids.append(tid)
    candidates = CandidateVocabulary(ids, corpus.vocab)
    candidates.save(root / "candidates.txt")
    return World(corpus=corpus, store=store, ir=ir, candidates=candidates,
                 embedder_config=config, root=root)


def fact_docs(n_facts: int, sentences_per_doc: int = 2):
    """Synthetic fact corpus: each fact is stated verbatim once in a document
    titled after its subject.  Returns (docs, facts); facts are
    (subject, relation, object) with the statement template below."""
    docs = []
    facts = []
    relations = ("born_in", "works_in", "capital_of")
    for i in range(n_facts):
        subject = f"person{i} name{i}"
        obj = f"city{i}"
        relation = relations[i % len(relations)]
        body = f"{subject} was born in {obj}."
        if sentences_per_doc > 1:
            body += f" {subject} lived a quiet life."
        docs.append((subject, body))
        facts.append((subject, relation, obj))
    return docs, facts


def fact_queries(facts):
    from bknn.evaluation import FactTriple, instantiate
    return [instantiate(FactTriple(subject=s, relation=r, obj=o,
                                   template="X was born in Y."),
                        query_id=f"q{i:05d}")
            for i, (s, r, o) in enumerate(facts)]


@dataclass
class LadderWorld:
    world: World
    queries: list
    lm_rows: list[dict]
    thetas: list[float]      # per-query switch points on the lambda/(1-lambda) axis
    lm_path: Path

    def expected_p_at_1(self, lam: float) -> float:
        odds = lam / (1.0 - lam)
        return sum(1 for th in self.thetas if odds > th) / len(self.thetas)


def build_lambda_ladder_world(root: Path, zeros: int, period: int,
                              specs: list[tuple[int, float]]) -> LadderWorld:
    """A world whose grid-search optimum is known by construction.

    One query per (gold_per_period, lm_delta) spec.  Each query's document
    holds ``zeros`` sentences identical to the query except at the masked
    position, so their masked contexts sit at distance zero from the query
    embedding; ``gold_per_period`` of every ``period`` name the gold token and
    the rest a wrong token.  The kNN side therefore gives the gold token the
    exact margin (2*gold_per_period - period)/period for every k that is a
    multiple of the period, independent of the distance scale.  An imported
    LM puts ``lm_delta`` more mass on the wrong token, so the query flips to
    correct exactly when lam/(1-lam) exceeds delta/margin.
    """
    import json as _json

    from bknn.evaluation import load_dataset
    from bknn.pipeline import CandidateVocabulary

    assert zeros % period == 0
    docs = []
    rows = []
    lm_rows = []
    thetas = []
    fillers = [f"filler{i}" for i in range(20)]
    docs.append(("filler page", " ".join(fillers) + "."))
    for i, (gold_per_period, delta) in enumerate(specs):
        subject = f"subj{i} tag{i}"
        gold, wrong = f"gold{i}", f"wrong{i}"
        sentences = []
        for j in range(zeros):
            target = gold if (j % period) < gold_per_period else wrong
            sentences.append(f"{subject} answer token is {target}.")
        docs.append((subject, " ".join(sentences)))
        rows.append({"query_id": f"lq{i:03d}",
                     "masked_text": f"{subject} answer token is [MASK].",
                     "subject": subject, "answer": gold, "relation": "rel"})
        margin = (2 * gold_per_period - period) / period
        assert margin > 0
        thetas.append(delta / margin)
        filler_share = (1.0 - delta) / len(fillers)
        lm_rows.append({"query_id": f"lq{i:03d}",
                        "probs": [[wrong, delta], [gold, 0.0]]
                        + [[f, filler_share] for f in fillers]})
    world = build_world(root, docs,
                        candidate_surfaces=[f"gold{i}" for i in range(len(specs))]
                        + [f"wrong{i}" for i in range(len(specs))] + fillers)
    dataset_path = root / "dev.jsonl"
    dataset_path.write_text("".join(_json.dumps(r) + "\n" for r in rows))
    lm_path = root / "lm.jsonl"
    lm_path.write_text("".join(_json.dumps(r) + "\n" for r in lm_rows))
    queries = load_dataset(dataset_path).queries
    return LadderWorld(world=world, queries=queries, lm_rows=lm_rows,
                       thetas=thetas, lm_path=lm_path)


@pytest.fixture(scope="session")
def small_world(tmp_path_factory) -> World:
    docs = [
        ("hans gefors", "Hans Gefors was born in Stockholm. He wrote operas."),
        ("albert einstein", "Albert Einstein was born in Ulm. He developed physics."),
        ("james joyce", "James Joyce wrote Ulysses. James Joyce was born in Dublin."),
        ("regiomontanus", "Regiomontanus works in the field of mathematics."),
        ("filler page", "Nothing relevant here. Plain words fill this page."),
    ]
    return build_world(tmp_path_factory.mktemp("small_world"), docs)
