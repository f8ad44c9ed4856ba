"""Key-value datastore of (masked-context embedding, token) records.

Binary format (little-endian)::

    header:  magic "BKNNDS\\0\\0" (8), version u16 = 1, dim u32, record_count u64
    record:  doc_id u32, sentence_index u16, token_index u16, token_id u32,
             key: dim x f32

Records are grouped by document in corpus order, so a set of documents maps
to a handful of contiguous ranges and the retrieval-then-search path is one
sequential scan per document.  A JSON manifest sits next to the binary
(``<file>.manifest.json``) and is written last, making partial builds
detectable.  It carries the embedder provenance, per-document record ranges,
a whole-file SHA-256 and per-document CRC32s for positioned corruption
reports.  This binary + manifest pair is also the exchange format external
embedding producers emit.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .corpus import CorpusStore
from .embedder import EmbedderConfig, ReferenceEmbedder, embed_masked_context
from .errors import DataFormatError

MAGIC = b"BKNNDS\x00\x00"
VERSION = 1
_HEADER = struct.Struct("<8sHIQ")   # magic, version, dim, record_count


def record_dtype(dim: int) -> np.dtype:
    return np.dtype([
        ("doc_id", "<u4"),
        ("sentence_index", "<u2"),
        ("token_index", "<u2"),
        ("token_id", "<u4"),
        ("key", "<f4", (dim,)),
    ])


@dataclass(frozen=True)
class DatastoreRecord:
    record_id: int
    doc_id: int
    sentence_index: int
    token_index: int
    token_id: int
    key: np.ndarray


def manifest_path(store_path: Path | str) -> Path:
    return Path(str(store_path) + ".manifest.json")


def _write_manifest(store_path: Path, dim: int, record_count: int,
                    embedder: dict, ranges: dict[int, tuple[int, int]],
                    doc_crc32: dict[int, int], extra: dict | None = None) -> None:
    digest = hashlib.sha256(Path(store_path).read_bytes()).hexdigest()
    manifest = {
        "dim": dim,
        "record_count": record_count,
        "doc_count": len(ranges),
        "embedder": embedder,
        "ranges": {str(d): [first, count] for d, (first, count) in sorted(ranges.items())},
        "doc_crc32": {str(d): c for d, c in sorted(doc_crc32.items())},
        "sha256": digest,
    }
    if extra:
        manifest.update(extra)
    manifest_path(store_path).write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n", "utf-8")


class Datastore:
    """Read view over a committed datastore file (memory-mapped)."""

    def __init__(self, path: Path, dim: int, records: np.ndarray,
                 ranges: dict[int, tuple[int, int]], embedder_config: EmbedderConfig,
                 manifest: dict):
        self.path = path
        self.dim = dim
        self.records = records                  # structured memmap
        self.ranges = ranges                    # doc_id -> (first, count)
        self.embedder_config = embedder_config
        self.manifest = manifest

    # -- opening / verification --------------------------------------------

    @classmethod
    def open(cls, path: Path | str) -> "Datastore":
        path = Path(path)
        dim, record_count = read_header(path)
        mpath = manifest_path(path)
        if not mpath.exists():
            raise DataFormatError(
                f"{path}: missing manifest {mpath.name} (partial or foreign build)")
        try:
            manifest = json.loads(mpath.read_text("utf-8"))
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{mpath}: malformed manifest: {exc}") from exc
        if manifest["dim"] != dim or manifest["record_count"] != record_count:
            raise DataFormatError(
                f"{path}: manifest disagrees with header "
                f"(dim {manifest['dim']} vs {dim}, "
                f"count {manifest['record_count']} vs {record_count})")
        ranges = {int(d): (first, count)
                  for d, (first, count) in manifest["ranges"].items()}
        _check_range_partition(ranges, record_count)
        records = np.memmap(path, dtype=record_dtype(dim), mode="r",
                            offset=_HEADER.size, shape=(record_count,))
        config = EmbedderConfig.from_dict(manifest["embedder"])
        return cls(path, dim, records, ranges, config, manifest)

    def verify(self) -> None:
        """Full integrity check: whole-file SHA-256 plus per-document CRCs,
        reporting the byte range of the first corrupt document."""
        data = Path(self.path).read_bytes()
        rsize = record_dtype(self.dim).itemsize
        for doc_id, (first, count) in sorted(self.ranges.items()):
            lo = _HEADER.size + first * rsize
            hi = lo + count * rsize
            crc = zlib.crc32(data[lo:hi])
            expect = self.manifest["doc_crc32"][str(doc_id)]
            if crc != expect:
                raise DataFormatError(
                    f"{self.path}: checksum mismatch for doc {doc_id}, "
                    f"bytes [{lo}, {hi})")
        if hashlib.sha256(data).hexdigest() != self.manifest["sha256"]:
            raise DataFormatError(f"{self.path}: whole-file SHA-256 mismatch")

    # -- slicing / scanning --------------------------------------------------

    @property
    def record_count(self) -> int:
        return len(self.records)

    def slice(self, doc_ids: Iterable[int]) -> list[tuple[int, int]]:
        """Record ranges for the given documents, ascending doc id."""
        out = []
        for doc_id in sorted(set(doc_ids)):
            rng = self.ranges.get(doc_id)
            if rng is None:
                raise DataFormatError(f"doc_id {doc_id} not in datastore {self.path}")
            out.append(rng)
        return out

    def full_range(self) -> list[tuple[int, int]]:
        return [(0, self.record_count)] if self.record_count else []

    def scan(self, ranges: Sequence[tuple[int, int]]) -> Iterator[DatastoreRecord]:
        """Stream records in range order without materializing the store."""
        for first, count in ranges:
            if first < 0 or first + count > self.record_count:
                raise DataFormatError(
                    f"range ({first}, {count}) outside [0, {self.record_count})")
            for i in range(first, first + count):
                row = self.records[i]
                yield DatastoreRecord(
                    record_id=i,
                    doc_id=int(row["doc_id"]),
                    sentence_index=int(row["sentence_index"]),
                    token_index=int(row["token_index"]),
                    token_id=int(row["token_id"]),
                    key=np.array(row["key"]),
                )


def read_header(path: Path | str) -> tuple[int, int]:
    """Return (dim, record_count), checking magic, version and file size."""
    path = Path(path)
    size = path.stat().st_size
    if size < _HEADER.size:
        raise DataFormatError(f"{path}: truncated header at byte {size}")
    with open(path, "rb") as fh:
        magic, version, dim, record_count = _HEADER.unpack(fh.read(_HEADER.size))
    if magic != MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r} at byte 0")
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported version {version} at byte 8")
    expected = _HEADER.size + record_count * record_dtype(dim).itemsize
    if size != expected:
        raise DataFormatError(
            f"{path}: size {size} does not match {record_count} records "
            f"(expected {expected}); truncated at byte {min(size, expected)}")
    return dim, record_count


def _check_range_partition(ranges: dict[int, tuple[int, int]], record_count: int) -> None:
    spans = sorted(ranges.values())
    cursor = 0
    for first, count in spans:
        if first != cursor:
            raise DataFormatError(
                f"manifest ranges do not partition records (gap/overlap at {first})")
        cursor = first + count
    if cursor != record_count:
        raise DataFormatError(
            f"manifest ranges cover {cursor} records, header says {record_count}")


# -- building ----------------------------------------------------------------


def _embed_doc_records(corpus: CorpusStore, doc_id: int,
                       embedder: ReferenceEmbedder) -> np.ndarray:
    doc = corpus.document(doc_id)
    dim = embedder.config.dim
    rows = []
    for si, sent in enumerate(doc.sentences):
        surfaces = corpus.surfaces(sent)
        for ti, tid in enumerate(sent.tokens):
            key = embed_masked_context(surfaces, ti, embedder)
            rows.append((doc_id, si, ti, tid, key))
    arr = np.zeros(len(rows), dtype=record_dtype(dim))
    for i, (d, si, ti, tid, key) in enumerate(rows):
        arr[i] = (d, si, ti, tid, key)
    return arr


def build(corpus: CorpusStore, config: EmbedderConfig, out_path: Path | str) -> Datastore:
    """Embed every occurrence and write the datastore; manifest written last."""
    if config.embedder_kind != "reference":
        raise DataFormatError(
            "build requires the reference embedder; use import for external embeddings")
    out_path = Path(out_path)
    embedder = ReferenceEmbedder(config)
    ranges: dict[int, tuple[int, int]] = {}
    doc_crc32: dict[int, int] = {}
    total = 0
    with open(out_path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, config.dim, 0))
        for doc in corpus.documents:
            arr = _embed_doc_records(corpus, doc.doc_id, embedder)
            raw = arr.tobytes()
            fh.write(raw)
            ranges[doc.doc_id] = (total, len(arr))
            doc_crc32[doc.doc_id] = zlib.crc32(raw)
            total += len(arr)
        fh.seek(0)
        fh.write(_HEADER.pack(MAGIC, VERSION, config.dim, total))
    _write_manifest(out_path, config.dim, total, config.to_dict(), ranges, doc_crc32)
    return Datastore.open(out_path)


def append(store_path: Path | str, corpus: CorpusStore, new_doc_ids: Sequence[int],
           config: EmbedderConfig) -> Datastore:
    """Append records for ``new_doc_ids``; existing record offsets unchanged."""
    store = Datastore.open(store_path)
    existing = store.embedder_config
    if (existing.embedder_kind, existing.dim, existing.layer_tag) != (
            config.embedder_kind, config.dim, config.layer_tag):
        raise DataFormatError(
            "embedder config mismatch on append:\n"
            f"  datastore: {existing.to_dict()}\n"
            f"  requested: {config.to_dict()}")
    if config.embedder_kind != "reference":
        raise DataFormatError("append with imported embeddings is not supported; "
                              "re-export and import a new datastore instead")
    embedder = ReferenceEmbedder(config)
    ranges = dict(store.ranges)
    doc_crc32 = {int(d): c for d, c in store.manifest["doc_crc32"].items()}
    total = store.record_count
    del store  # release the memmap before writing
    with open(store_path, "r+b") as fh:
        fh.seek(0, 2)
        for doc_id in new_doc_ids:
            if doc_id in ranges:
                raise DataFormatError(f"doc_id {doc_id} already present in datastore")
            arr = _embed_doc_records(corpus, doc_id, embedder)
            raw = arr.tobytes()
            fh.write(raw)
            ranges[doc_id] = (total, len(arr))
            doc_crc32[doc_id] = zlib.crc32(raw)
            total += len(arr)
        fh.seek(0)
        fh.write(_HEADER.pack(MAGIC, VERSION, config.dim, total))
    _write_manifest(store_path, config.dim, total, config.to_dict(), ranges, doc_crc32)
    return Datastore.open(store_path)


def import_exchange(source: Path | str, out_path: Path | str,
                    expected: EmbedderConfig | None = None) -> Datastore:
    """Validate an externally produced datastore and install it at ``out_path``.

    The source must verify end to end (header, ranges, CRCs, SHA-256).  When
    ``expected`` is given, its dim and layer_tag must match the source
    manifest's embedder provenance.
    """
    source = Path(source)
    store = Datastore.open(source)
    store.verify()
    if expected is not None:
        got = store.embedder_config
        if (got.dim, got.layer_tag) != (expected.dim, expected.layer_tag):
            raise DataFormatError(
                "imported embeddings do not match the expected embedder config:\n"
                f"  imported: dim={got.dim} layer_tag={got.layer_tag!r}\n"
                f"  expected: dim={expected.dim} layer_tag={expected.layer_tag!r}")
    out_path = Path(out_path)
    if out_path.resolve() != source.resolve():
        out_path.write_bytes(source.read_bytes())
        manifest_path(out_path).write_text(
            manifest_path(source).read_text("utf-8"), "utf-8")
    return Datastore.open(out_path)
