"""Command-line entry point: one binary, subcommand per lifecycle stage.

Configuration comes from an optional JSON file (``--config``) with flag
overrides; flags win.  Relative paths inside the config resolve against the
config file's directory.  Exit codes: 0 success, 1 usage error, 2 data or
format error, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import ann as ann_mod
from . import datastore as ds_mod
from . import evaluation as ev_mod
from . import ir_index as ir_mod
from .corpus import CorpusStore, read_documents_jsonl
from .embedder import EmbedderConfig, ReferenceEmbedder
from .errors import BknnError, DataFormatError, UsageError
from .knn import KnnConfig
from .pipeline import (
    Artifacts,
    CandidateVocabulary,
    ImportedLm,
    ImportedQueryEmbeddings,
    InterpolationConfig,
    ReferenceQueryEmbedder,
    StubLm,
    parse_cloze_text,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclasses.dataclass
class ProjectConfig:
    corpus_dir: str | None = None
    datastore: str | None = None
    ir_index: str | None = None
    ann_index: str | None = None
    candidate_vocab: str | None = None
    lm_predictions: str | None = None
    query_embeddings: str | None = None
    stub_lm: str = "corpus"                      # "corpus" | "uniform"
    embedder: EmbedderConfig = dataclasses.field(default_factory=EmbedderConfig)
    knn: KnnConfig = dataclasses.field(default_factory=KnnConfig)
    ir: ir_mod.IrQueryConfig = dataclasses.field(default_factory=ir_mod.IrQueryConfig)
    interpolation: InterpolationConfig = dataclasses.field(
        default_factory=InterpolationConfig)
    ivf: ann_mod.IvfConfig = dataclasses.field(default_factory=ann_mod.IvfConfig)
    threads: int | None = None

    @classmethod
    def load(cls, path: str | None) -> "ProjectConfig":
        if path is None:
            return cls()
        try:
            raw = json.loads(Path(path).read_text("utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataFormatError(f"cannot read config {path}: {exc}") from exc
        base = Path(path).parent

        def p(key):
            value = raw.get(key)
            return str(base / value) if value else None

        kwargs = {}
        for key in ("corpus_dir", "datastore", "ir_index", "ann_index",
                    "candidate_vocab", "lm_predictions", "query_embeddings"):
            kwargs[key] = p(key)
        kwargs["stub_lm"] = raw.get("stub_lm", "corpus")
        if "embedder" in raw:
            kwargs["embedder"] = EmbedderConfig.from_dict(raw["embedder"])
        if "knn" in raw:
            kwargs["knn"] = KnnConfig(**raw["knn"])
        if "ir" in raw:
            kwargs["ir"] = ir_mod.IrQueryConfig(**raw["ir"])
        if "interpolation" in raw:
            kwargs["interpolation"] = InterpolationConfig(
                lam=raw["interpolation"]["lambda"])
        if "ivf" in raw:
            kwargs["ivf"] = ann_mod.IvfConfig(**raw["ivf"])
        if "threads" in raw:
            kwargs["threads"] = raw["threads"]
        return cls(**kwargs)

    def resolve_threads(self, flag_value: int | None) -> int:
        if flag_value is not None:
            return flag_value
        if self.threads is not None:
            return self.threads
        env = os.environ.get("BKNN_THREADS")
        if env:
            try:
                return max(1, int(env))
            except ValueError as exc:
                raise UsageError(f"BKNN_THREADS is not an integer: {env!r}") from exc
        return os.cpu_count() or 1


def _require(value, name: str):
    if value is None:
        raise UsageError(f"missing required path: pass --{name.replace('_', '-')} "
                         f"or set {name!r} in the config file")
    return value


def _load_artifacts(cfg: ProjectConfig, need_ann: bool = False,
                    need_ir: bool = True) -> Artifacts:
    corpus = CorpusStore.open(_require(cfg.corpus_dir, "corpus_dir"))
    store = ds_mod.Datastore.open(_require(cfg.datastore, "datastore"))
    ir = (ir_mod.InvertedIndex.load(_require(cfg.ir_index, "ir_index"))
          if need_ir else None)
    candidates = CandidateVocabulary.from_file(
        _require(cfg.candidate_vocab, "candidate_vocab"), corpus.vocab)
    store_embedder = store.embedder_config
    if store_embedder.embedder_kind == "reference":
        query_embedder = ReferenceQueryEmbedder(ReferenceEmbedder(store_embedder))
    else:
        qpath = _require(cfg.query_embeddings, "query_embeddings")
        qstore = ds_mod.Datastore.open(qpath)
        got = qstore.embedder_config
        if (got.dim, got.layer_tag) != (store_embedder.dim, store_embedder.layer_tag):
            raise DataFormatError(
                f"query embeddings {qpath} (dim={got.dim}, layer_tag={got.layer_tag!r}) "
                f"do not match the datastore (dim={store_embedder.dim}, "
                f"layer_tag={store_embedder.layer_tag!r})")
        query_embedder = ImportedQueryEmbeddings(qstore)
    if cfg.lm_predictions:
        lm = ImportedLm.load(cfg.lm_predictions)
    elif cfg.stub_lm == "uniform":
        lm = StubLm()
    elif cfg.stub_lm == "corpus":
        lm = StubLm.from_corpus(corpus, candidates)
    else:
        raise UsageError(f"unknown stub_lm kind {cfg.stub_lm!r}")
    ann_index = None
    if need_ann:
        ann_index = ann_mod.IvfIndex.load(_require(cfg.ann_index, "ann_index"))
    return Artifacts(store=store, ir=ir, query_embedder=query_embedder, lm=lm,
                     candidates=candidates, knn_config=cfg.knn, ir_config=cfg.ir,
                     interp=cfg.interpolation, ann_index=ann_index)


# -- subcommands ---------------------------------------------------------------


def cmd_ingest(args, cfg: ProjectConfig) -> int:
    store = CorpusStore.ingest(read_documents_jsonl(args.corpus), args.out)
    print(f"ingested {len(store.documents)} documents, "
          f"vocabulary {len(store.vocab)} tokens -> {args.out}")
    return 0


def cmd_build_datastore(args, cfg: ProjectConfig) -> int:
    if args.embedder == "reference":
        if not args.corpus:
            raise UsageError("--embedder reference requires --corpus")
        corpus = CorpusStore.open(args.corpus)
        store = ds_mod.build(corpus, cfg.embedder, args.out)
    else:
        if not args.embeddings:
            raise UsageError("--embedder import requires --embeddings")
        expected = None
        if args.expect_layer_tag or args.expect_dim:
            manifest = json.loads(
                ds_mod.manifest_path(args.embeddings).read_text("utf-8"))
            got = EmbedderConfig.from_dict(manifest["embedder"])
            expected = dataclasses.replace(
                got,
                dim=args.expect_dim if args.expect_dim else got.dim,
                layer_tag=args.expect_layer_tag if args.expect_layer_tag else got.layer_tag)
        store = ds_mod.import_exchange(args.embeddings, args.out, expected)
    print(f"datastore: {store.record_count} records, dim {store.dim}, "
          f"layer_tag {store.embedder_config.layer_tag!r} -> {args.out}")
    return 0


def cmd_append_datastore(args, cfg: ProjectConfig) -> int:
    corpus = CorpusStore.open(_require(cfg.corpus_dir or args.corpus_dir, "corpus_dir"))
    new_ids = corpus.append_documents(read_documents_jsonl(args.corpus))
    store = ds_mod.append(args.store, corpus, new_ids, cfg.embedder)
    print(f"appended {len(new_ids)} documents "
          f"({store.record_count} records total); rebuild the IR index to "
          "retrieve from them")
    return 0


def cmd_build_ir(args, cfg: ProjectConfig) -> int:
    corpus = CorpusStore.open(args.corpus)
    index = ir_mod.build_index(corpus)
    index.save(args.out)
    print(f"IR index: {len(index.postings)} terms over {index.doc_count} "
          f"documents -> {args.out}")
    return 0


def cmd_build_ann(args, cfg: ProjectConfig) -> int:
    store = ds_mod.Datastore.open(args.store)
    ivf = cfg.ivf
    if args.clusters:
        ivf = dataclasses.replace(ivf, n_clusters=args.clusters,
                                  n_probe=min(ivf.n_probe, args.clusters))
    if args.probe:
        ivf = dataclasses.replace(ivf, n_probe=args.probe)
    if args.pq:
        m, bits = args.pq
        ivf = dataclasses.replace(ivf, pq_enabled=True, pq_m=m, pq_bits=bits)
    index = ann_mod.train(store, ivf)
    ann_mod.populate(index, store)
    index.save(args.out)
    print(f"ANN index: {index.n_lists} lists over {store.record_count} records, "
          f"pq={'on' if index.config.pq_enabled else 'off'} -> {args.out}")
    return 0


def cmd_query(args, cfg: ProjectConfig) -> int:
    artifacts = _load_artifacts(cfg, need_ann=args.no_ir, need_ir=not args.no_ir)
    query = parse_cloze_text(args.text, subject=args.subject,
                             query_id=args.query_id,
                             mask_token=cfg.embedder.mask_token)
    from .pipeline import answer
    result = answer(query, artifacts, mode=args.mode, ir_enabled=not args.no_ir)
    for tid, prob in result.ranking[:args.top]:
        print(f"{artifacts.candidates.surface(tid)}\t{prob:.6f}")
    if result.retrieved_docs:
        corpus = CorpusStore.open(_require(cfg.corpus_dir, "corpus_dir"))
        print("retrieved documents:")
        for doc_id in result.retrieved_docs:
            print(f"  [{doc_id}] {corpus.document(doc_id).title}")
    if result.neighbors:
        corpus = CorpusStore.open(_require(cfg.corpus_dir, "corpus_dir"))
        print("nearest contexts:")
        for n in result.neighbors[:args.top]:
            print(f"  {corpus.vocab.surface(n.token_id)}\td={n.distance:.4f}"
                  f"\tdoc={corpus.document(n.doc_id).title}")
    return 0


def cmd_eval(args, cfg: ProjectConfig) -> int:
    artifacts = _load_artifacts(cfg, need_ann=args.no_ir, need_ir=not args.no_ir)
    dataset = ev_mod.load_dataset(args.dataset)
    threads = cfg.resolve_threads(args.threads)
    report = ev_mod.evaluate(dataset.queries, artifacts, mode=args.mode,
                             ir_enabled=not args.no_ir, threads=threads)
    print(report.format_table())
    if dataset.rejected:
        print(f"rejected at ingestion: {dataset.rejected}")
    if args.report:
        payload = report.to_dict()
        payload["rejected_at_ingestion"] = dataset.rejected
        Path(args.report).write_text(
            json.dumps(payload, sort_keys=True, indent=1) + "\n", "utf-8")
    return 0


def cmd_gridsearch(args, cfg: ProjectConfig) -> int:
    artifacts = _load_artifacts(cfg)
    dataset = ev_mod.load_dataset(args.dev)
    result = ev_mod.grid_search(dataset.queries, artifacts)
    best = result.best
    print(f"best cell: N={best.n} lambda={best.lam} k={best.k} l={best.l} "
          f"(P@1={result.best_p_at_1:.4f} over {result.query_count} queries)")
    Path(args.out).write_text(
        json.dumps(result.to_dict(), sort_keys=True, indent=1) + "\n", "utf-8")
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="bknn",
                     description="Build, query and evaluate a masked-context "
                                 "retrieval pipeline over a text corpus.")
    parser.add_argument("--config", help="JSON project config; flags override it")
    sub = parser.add_subparsers(dest="command", metavar="<command>")

    p = sub.add_parser("ingest", help="tokenize a raw JSON-lines corpus into a corpus store")
    p.add_argument("--corpus", required=True, help="input JSON-lines file of {title, text}")
    p.add_argument("--out", required=True, help="output corpus store directory")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("build-datastore", help="embed every occurrence into a datastore")
    p.add_argument("--corpus", help="corpus store directory (reference embedder)")
    p.add_argument("--embedder", choices=("reference", "import"), default="reference",
                   help="embed locally or install an externally produced file")
    p.add_argument("--embeddings", help="exchange file to import")
    p.add_argument("--expect-dim", type=int, help="require this dimension on import")
    p.add_argument("--expect-layer-tag", help="require this layer tag on import")
    p.add_argument("--out", required=True, help="output datastore file")
    p.set_defaults(func=cmd_build_datastore)

    p = sub.add_parser("append-datastore",
                       help="append new documents to the corpus and datastore")
    p.add_argument("--store", required=True, help="datastore file to extend")
    p.add_argument("--corpus", required=True, help="JSON-lines file of new documents")
    p.add_argument("--corpus-dir", help="corpus store directory (defaults to config)")
    p.set_defaults(func=cmd_append_datastore)

    p = sub.add_parser("build-ir", help="build the TF-IDF inverted index")
    p.add_argument("--corpus", required=True, help="corpus store directory")
    p.add_argument("--out", required=True, help="output index file")
    p.set_defaults(func=cmd_build_ir)

    p = sub.add_parser("build-ann", help="train and populate the IVF index")
    p.add_argument("--store", required=True, help="datastore file")
    p.add_argument("--clusters", type=int, help="number of coarse clusters")
    p.add_argument("--probe", type=int, help="posting lists probed per query")
    p.add_argument("--pq", nargs=2, type=int, metavar=("M", "BITS"),
                   help="enable product quantization with M subquantizers of BITS bits")
    p.add_argument("--out", required=True, help="output index file")
    p.set_defaults(func=cmd_build_ann)

    p = sub.add_parser("query", help="answer a single cloze query")
    p.add_argument("--text", required=True, help="cloze text containing the mask marker")
    p.add_argument("--subject", help="optional subject for retrieval")
    p.add_argument("--query-id", help="query id (needed with imported predictions)")
    p.add_argument("--top", type=int, default=10, help="ranked answers to print")
    p.add_argument("--mode", choices=("lm", "knn", "interpolated"),
                   default="interpolated", help="prediction mode")
    p.add_argument("--no-ir", action="store_true",
                   help="search the full datastore through the ANN index")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="evaluate a dataset and write a report")
    p.add_argument("--dataset", required=True, help="JSON-lines dataset")
    p.add_argument("--mode", choices=("lm", "knn", "interpolated"),
                   default="interpolated", help="prediction mode")
    p.add_argument("--no-ir", action="store_true",
                   help="search the full datastore through the ANN index")
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--threads", type=int, help="worker threads (default: cores, "
                   "or BKNN_THREADS)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gridsearch", help="exhaustive hyperparameter search on a dev set")
    p.add_argument("--dev", required=True, help="JSON-lines dev dataset")
    p.add_argument("--out", required=True, help="write full grid results here")
    p.set_defaults(func=cmd_gridsearch)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_help()
            return 1
        cfg = ProjectConfig.load(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataFormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (BknnError, ValueError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
