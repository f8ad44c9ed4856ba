#!/usr/bin/env python3
"""Measure how much the retrieval step matters under adversarial distractors.

Builds a corpus where every fact's masked context also appears on distractor
pages with a wrong answer (twice, so the wrong token wins any full-store
vote), then compares retrieval-sliced search against approximate search over
the whole datastore.
"""

import argparse
import tempfile
from pathlib import Path

from bknn.ann import IvfConfig, populate, train
from bknn.corpus import CorpusStore
from bknn.datastore import build
from bknn.embedder import EmbedderConfig, ReferenceEmbedder
from bknn.evaluation import FactTriple, evaluate, instantiate
from bknn.ir_index import build_index
from bknn.knn import KnnConfig
from bknn.pipeline import (
    Artifacts,
    CandidateVocabulary,
    ReferenceQueryEmbedder,
    StubLm,
)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--facts", type=int, default=100)
    parser.add_argument("--distractors", type=int, default=50)
    parser.add_argument("--clusters", type=int, default=256)
    parser.add_argument("--probe", type=int, default=8)
    args = parser.parse_args()

    docs, facts = [], []
    for i in range(args.facts):
        subject, obj = f"person{i} name{i}", f"city{i}"
        docs.append((subject,
                     f"{subject} was born in {obj}. {subject} lived a quiet life."))
        facts.append(FactTriple(subject=subject, relation="born_in", obj=obj,
                                template="X was born in Y."))
    pages = [[] for _ in range(args.distractors)]
    for i in range(args.facts):
        sent = f"person{i} name{i} was born in city{(i + 1) % args.facts}."
        pages[(2 * i) % args.distractors].append(sent)
        pages[(2 * i + 1) % args.distractors].append(sent)
    docs += [(f"noise page {j}", " ".join(sents)) for j, sents in enumerate(pages)]

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        corpus = CorpusStore.ingest(docs, root / "corpus")
        config = EmbedderConfig(dim=64)
        store = build(corpus, config, root / "store.bknnds")
        ir = build_index(corpus)
        candidates = CandidateVocabulary(
            [corpus.vocab.id_of(f"city{i}") for i in range(args.facts)],
            corpus.vocab)
        index = populate(train(store, IvfConfig(n_clusters=args.clusters,
                                                n_probe=args.probe, seed=0)),
                         store)
        queries = [instantiate(f, query_id=f"q{i}") for i, f in enumerate(facts)]
        artifacts = Artifacts(
            store=store, ir=ir,
            query_embedder=ReferenceQueryEmbedder(ReferenceEmbedder(config)),
            lm=StubLm(), candidates=candidates, ann_index=index,
            knn_config=KnnConfig(k=128, scale=0.05))

        with_ir = evaluate(queries, artifacts, mode="interpolated", ir_enabled=True)
        without = evaluate(queries, artifacts, mode="interpolated", ir_enabled=False)
        print(f"{args.facts} facts, {args.distractors} distractor pages, "
              f"{store.record_count} records")
        print(f"P@1 with retrieval slice : {with_ir.means[1]:.3f}")
        print(f"P@1 full-store search    : {without.means[1]:.3f}")
        print(f"gap                      : {with_ir.means[1] - without.means[1]:+.3f}")


if __name__ == "__main__":
    main()
