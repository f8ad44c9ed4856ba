"""Standalone readers/writers for the exchange formats shared with the main
package.  The sidecar talks to it only through these files, so the format
knowledge is deliberately duplicated here rather than imported.

- corpus store: directory with manifest.json (magic "BKNN-CORPUS\\n1"),
  vocab.txt, docs.jsonl
- datastore: "BKNNDS\\0\\0" binary + <file>.manifest.json with per-document
  ranges, per-document CRC32s and a whole-file SHA-256
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

CORPUS_MAGIC = "BKNN-CORPUS\n1"
DATASTORE_MAGIC = b"BKNNDS\x00\x00"
DATASTORE_VERSION = 1
_HEADER = struct.Struct("<8sHIQ")


def record_dtype(dim: int) -> np.dtype:
    return np.dtype([
        ("doc_id", "<u4"),
        ("sentence_index", "<u2"),
        ("token_index", "<u2"),
        ("token_id", "<u4"),
        ("key", "<f4", (dim,)),
    ])


@dataclass
class CorpusDocument:
    doc_id: int
    title: str
    sentences: list[list[int]]        # token ids per sentence


@dataclass
class Corpus:
    documents: list[CorpusDocument]
    vocab: list[str]                  # index = token id

    def surfaces(self, tokens: list[int]) -> list[str]:
        return [self.vocab[t] for t in tokens]

    def occurrences(self) -> Iterator[tuple[int, int, int, int]]:
        """(doc_id, sentence_index, token_index, token_id) in corpus order."""
        for doc in self.documents:
            for si, sent in enumerate(doc.sentences):
                for ti, tid in enumerate(sent):
                    yield doc.doc_id, si, ti, tid

    @property
    def total_occurrences(self) -> int:
        return sum(len(s) for d in self.documents for s in d.sentences)


def read_corpus(directory: Path | str) -> Corpus:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text("utf-8"))
    if manifest.get("magic") != CORPUS_MAGIC:
        raise ValueError(f"{d}: not a corpus store (bad magic)")
    vocab_lines = (d / "vocab.txt").read_text("utf-8").split("\n")
    if vocab_lines and vocab_lines[-1] == "":
        vocab_lines.pop()
    documents = []
    with open(d / "docs.jsonl", encoding="utf-8") as fh:
        for line in fh:
            raw = json.loads(line)
            documents.append(CorpusDocument(
                doc_id=raw["doc_id"], title=raw["title"],
                sentences=[s["tokens"] for s in raw["sentences"]]))
    return Corpus(documents=documents, vocab=vocab_lines)


@dataclass
class DatastoreWriter:
    """Streams records grouped by document and writes the manifest last, so
    interrupted exports are detectable by the importer."""

    path: Path
    dim: int
    layer_tag: str
    mask_token: str
    extra_manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.path = Path(self.path)
        self._fh = open(self.path, "wb")
        self._fh.write(_HEADER.pack(DATASTORE_MAGIC, DATASTORE_VERSION, self.dim, 0))
        self._count = 0
        self._ranges: dict[int, tuple[int, int]] = {}
        self._crcs: dict[int, int] = {}

    def write_document(self, doc_id: int, records: np.ndarray) -> None:
        if records.dtype != record_dtype(self.dim):
            raise ValueError("records have the wrong dtype for this writer")
        if doc_id in self._ranges:
            raise ValueError(f"doc {doc_id} written twice")
        raw = records.tobytes()
        self._fh.write(raw)
        self._ranges[doc_id] = (self._count, len(records))
        self._crcs[doc_id] = zlib.crc32(raw)
        self._count += len(records)

    def close(self) -> dict:
        self._fh.seek(0)
        self._fh.write(_HEADER.pack(DATASTORE_MAGIC, DATASTORE_VERSION, self.dim,
                                    self._count))
        self._fh.close()
        digest = hashlib.sha256(self.path.read_bytes()).hexdigest()
        manifest = {
            "dim": self.dim,
            "record_count": self._count,
            "doc_count": len(self._ranges),
            "embedder": {"embedder_kind": "imported", "dim": self.dim,
                         "layer_tag": self.layer_tag,
                         "mask_token": self.mask_token},
            "ranges": {str(d): [first, count]
                       for d, (first, count) in sorted(self._ranges.items())},
            "doc_crc32": {str(d): c for d, c in sorted(self._crcs.items())},
            "sha256": digest,
        }
        manifest.update(self.extra_manifest)
        Path(str(self.path) + ".manifest.json").write_text(
            json.dumps(manifest, sort_keys=True, indent=1) + "\n", "utf-8")
        return manifest
