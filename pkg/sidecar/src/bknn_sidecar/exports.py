"""The three export jobs: datastore embeddings, query embeddings, and
LM prediction files.  Everything is written in the exchange formats only."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .extract import Extractor, MaskedItem, SidecarConfig
from .formats import DatastoreWriter, read_corpus, record_dtype


def export_embeddings(corpus_dir: Path | str, config: SidecarConfig,
                      out_path: Path | str) -> dict:
    """One record per alignable occurrence, grouped by document in corpus
    order; skipped occurrences are counted in the manifest.  Returns the
    manifest."""
    corpus = read_corpus(corpus_dir)
    extractor = Extractor(config)
    writer = DatastoreWriter(Path(out_path), dim=extractor.dim,
                             layer_tag=config.layer_tag,
                             mask_token=extractor.mask_token)
    total = 0
    skipped = 0
    skipped_per_doc: dict[str, int] = {}
    for doc in corpus.documents:
        items: list[MaskedItem] = []
        doc_skipped = 0
        for si, sent in enumerate(doc.sentences):
            words = corpus.surfaces(sent)
            for ti, tid in enumerate(sent):
                total += 1
                encoded = extractor.encode_masked_sentence(words, ti)
                if encoded is None:
                    doc_skipped += 1
                    continue
                ids, mask_pos = encoded
                items.append(MaskedItem(ids, mask_pos, (doc.doc_id, si, ti, tid)))
        records = np.zeros(len(items), dtype=record_dtype(extractor.dim))
        for i, ((doc_id, si, ti, tid), vec) in enumerate(
                extractor.embeddings(items)):
            records[i] = (doc_id, si, ti, tid, vec)
        writer.write_document(doc.doc_id, records)
        skipped += doc_skipped
        if doc_skipped:
            skipped_per_doc[str(doc.doc_id)] = doc_skipped
    writer.extra_manifest = {
        "total_occurrences": total,
        "skipped_occurrences": skipped,
        "skipped_per_doc": skipped_per_doc,
    }
    return writer.close()


def _read_queries(path: Path | str) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def export_query_embeddings(queries_path: Path | str, config: SidecarConfig,
                            out_path: Path | str) -> dict:
    """Embed each query's mask position; records map to query ids through the
    manifest's query_ids list.  Unencodable queries are flagged and dropped."""
    rows = _read_queries(queries_path)
    extractor = Extractor(config)
    items = []
    flagged = []
    for row in rows:
        encoded = extractor.encode_masked_text(row["masked_text"])
        if encoded is None:
            flagged.append(row["query_id"])
            continue
        ids, mask_pos = encoded
        items.append(MaskedItem(ids, mask_pos, (row["query_id"],)))
    writer = DatastoreWriter(Path(out_path), dim=extractor.dim,
                             layer_tag=config.layer_tag,
                             mask_token=extractor.mask_token)
    query_ids = []
    for i, ((query_id,), vec) in enumerate(extractor.embeddings(items)):
        record = np.zeros(1, dtype=record_dtype(extractor.dim))
        record[0] = (i, 0, 0, 0, vec)
        writer.write_document(i, record)
        query_ids.append(query_id)
    writer.extra_manifest = {"query_ids": query_ids,
                             "flagged_queries": flagged}
    return writer.close()


def export_lm_predictions(queries_path: Path | str, candidates_path: Path | str,
                          config: SidecarConfig, out_path: Path | str,
                          report_path: Path | str | None = None) -> dict:
    """Per query, the mask-position distribution restricted to the candidate
    vocabulary and renormalized (softmax over the candidates' logits).
    Candidates that are not single known subwords are flagged; queries whose
    mask cannot be placed are flagged and dropped."""
    rows = _read_queries(queries_path)
    extractor = Extractor(config)
    candidates = [line.strip() for line in
                  Path(candidates_path).read_text("utf-8").splitlines()
                  if line.strip()]
    scored: list[tuple[str, int]] = []
    flagged_candidates = []
    for surface in candidates:
        tid = extractor.single_token_id(surface)
        if tid is None:
            flagged_candidates.append(surface)
        else:
            scored.append((surface, tid))
    if not scored:
        raise ValueError("no candidate is a single known model token")
    cand_ids = np.array([tid for _, tid in scored])

    items = []
    flagged_queries = []
    for row in rows:
        encoded = extractor.encode_masked_text(row["masked_text"])
        if encoded is None:
            flagged_queries.append(row["query_id"])
            continue
        ids, mask_pos = encoded
        items.append(MaskedItem(ids, mask_pos, (row["query_id"],)))

    emitted = 0
    with open(out_path, "w", encoding="utf-8") as fh:
        for (query_id,), logits in extractor.mask_logits(items):
            restricted = logits[cand_ids]
            restricted = restricted - restricted.max()
            weights = np.exp(restricted)
            probs = weights / weights.sum()
            fh.write(json.dumps({
                "query_id": query_id,
                "probs": [[surface, float(p)]
                          for (surface, _), p in zip(scored, probs)],
            }) + "\n")
            emitted += 1
    report = {
        "queries": len(rows),
        "emitted": emitted,
        "flagged_queries": flagged_queries,
        "flagged_candidates": flagged_candidates,
        "layer_tag": config.layer_tag,
    }
    if report_path:
        Path(report_path).write_text(
            json.dumps(report, sort_keys=True, indent=1) + "\n", "utf-8")
    return report
