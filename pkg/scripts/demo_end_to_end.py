#!/usr/bin/env python3
"""Build a small synthetic project end to end and compare prediction modes.

Creates a corpus of one page per fact, embeds it with the reference
embedder, builds the retrieval index, and evaluates the three modes on the
facts themselves.  Artifacts land in --workdir so the CLI can be pointed at
them afterwards.
"""

import argparse
import json
from pathlib import Path

from bknn.corpus import CorpusStore
from bknn.datastore import build
from bknn.embedder import EmbedderConfig
from bknn.evaluation import evaluate, load_dataset
from bknn.ir_index import build_index
from bknn.knn import KnnConfig
from bknn.pipeline import (
    Artifacts,
    CandidateVocabulary,
    ReferenceQueryEmbedder,
    StubLm,
)
from bknn.embedder import ReferenceEmbedder


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="demo_artifacts", help="output directory")
    parser.add_argument("--facts", type=int, default=200, help="number of facts")
    parser.add_argument("--dim", type=int, default=64, help="embedding dimension")
    parser.add_argument("--scale", type=float, default=0.05,
                        help="kNN distance scale (small: unit-norm embeddings)")
    args = parser.parse_args()

    root = Path(args.workdir)
    root.mkdir(parents=True, exist_ok=True)

    docs = []
    rows = []
    for i in range(args.facts):
        subject, obj = f"person{i} name{i}", f"city{i}"
        docs.append({"title": subject,
                     "text": f"{subject} was born in {obj}. "
                             f"{subject} lived a quiet life."})
        rows.append({"relation": "born_in", "subject": subject, "object": obj,
                     "template": "X was born in Y."})
    (root / "docs.jsonl").write_text("".join(json.dumps(d) + "\n" for d in docs))
    (root / "facts.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))

    corpus = CorpusStore.ingest(((d["title"], d["text"]) for d in docs),
                                root / "corpus")
    config = EmbedderConfig(dim=args.dim)
    store = build(corpus, config, root / "store.bknnds")
    index = build_index(corpus)
    index.save(root / "ir.bknnir")
    candidates = CandidateVocabulary(
        [corpus.vocab.id_of(f"city{i}") for i in range(args.facts)], corpus.vocab)
    candidates.save(root / "candidates.txt")

    queries = load_dataset(root / "facts.jsonl").queries
    artifacts = Artifacts(
        store=store, ir=index,
        query_embedder=ReferenceQueryEmbedder(ReferenceEmbedder(config)),
        lm=StubLm.from_corpus(corpus, candidates), candidates=candidates,
        knn_config=KnnConfig(k=128, scale=args.scale))

    print(f"{args.facts} facts, {store.record_count} datastore records, "
          f"{len(index.postings)} index terms\n")
    for mode in ("lm", "knn", "interpolated"):
        report = evaluate(queries, artifacts, mode=mode)
        print(f"mode={mode}")
        print(report.format_table())
        print()

    (root / "config.json").write_text(json.dumps({
        "corpus_dir": "corpus",
        "datastore": "store.bknnds",
        "ir_index": "ir.bknnir",
        "candidate_vocab": "candidates.txt",
        "embedder": config.to_dict(),
        "knn": {"k": 128, "scale": args.scale},
    }, indent=1))
    print(f"artifacts in {root}/ (config.json ready for the bknn CLI)")


if __name__ == "__main__":
    main()
