"""TF-IDF inverted index over documents, with unigram and within-sentence
bigram terms and a subject-page shortcut.

Scoring, pinned exactly::

    score(d) = sum over query terms t of  tf_weight(t, d) * idf(t)^2 / norm(d)
    tf_weight = 1 + ln(tf)
    idf(t)    = max(0, ln((doc_count - df(t) + 0.5) / (df(t) + 0.5)))
    norm(d)   = sqrt(sum over terms t in d of (tf_weight(t, d) * idf(t))^2)

Query terms are a multiset: repeated terms contribute once per repetition.
Documents scoring zero are suppressed; ranking ties break by ascending doc
id.  The index is immutable after build and byte-stable on disk.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import blockio
from .corpus import CorpusStore, normalize, tokenize
from .errors import DataFormatError

MAGIC = b"BKNNIR\x00\x00"
VERSION = 1

BIGRAM_SEP = " "


@dataclass(frozen=True)
class IrQueryConfig:
    top_n: int = 3
    use_subject_shortcut: bool = True

    def __post_init__(self):
        if self.top_n < 1:
            raise ValueError(f"top_n must be >= 1, got {self.top_n}")


def document_terms(sentences_tokens: Sequence[Sequence[str]]) -> list[str]:
    """Unigrams plus within-sentence bigrams, in text order.  Bigrams never
    span a sentence boundary."""
    terms: list[str] = []
    for tokens in sentences_tokens:
        terms.extend(tokens)
        terms.extend(a + BIGRAM_SEP + b for a, b in zip(tokens, tokens[1:]))
    return terms


class InvertedIndex:

    def __init__(self, postings: dict[str, list[tuple[int, int]]],
                 doc_count: int, doc_norms: dict[int, float],
                 title_map: dict[str, int]):
        self.postings = postings          # term -> [(doc_id, tf)] sorted by doc_id
        self.doc_count = doc_count
        self.doc_norms = doc_norms
        self.title_map = title_map

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def idf(self, term: str) -> float:
        df = self.df(term)
        if df == 0:
            return 0.0
        return max(0.0, math.log((self.doc_count - df + 0.5) / (df + 0.5)))

    # -- persistence ---------------------------------------------------------

    def save(self, path: Path | str) -> None:
        meta = json.dumps({"doc_count": self.doc_count}, sort_keys=True).encode()
        norms = json.dumps({str(d): n for d, n in sorted(self.doc_norms.items())},
                           sort_keys=True).encode()
        titles = json.dumps(dict(sorted(self.title_map.items())),
                            sort_keys=True, ensure_ascii=False).encode()
        chunks = []
        for term in sorted(self.postings):
            raw_term = term.encode("utf-8")
            plist = self.postings[term]
            chunks.append(struct.pack("<H", len(raw_term)))
            chunks.append(raw_term)
            chunks.append(struct.pack("<I", len(plist)))
            chunks.append(b"".join(struct.pack("<II", d, tf) for d, tf in plist))
        blockio.write_blocks(Path(path), MAGIC, VERSION, [
            ("meta", meta),
            ("norms", norms),
            ("titles", titles),
            ("postings", b"".join(chunks)),
        ])

    @classmethod
    def load(cls, path: Path | str) -> "InvertedIndex":
        blocks = blockio.read_blocks(Path(path), MAGIC, VERSION)
        meta = json.loads(blockio.require(blocks, "meta", path))
        doc_norms = {int(d): n
                     for d, n in json.loads(blockio.require(blocks, "norms", path)).items()}
        title_map = json.loads(blockio.require(blocks, "titles", path))
        postings: dict[str, list[tuple[int, int]]] = {}
        raw = blockio.require(blocks, "postings", path)
        off = 0
        while off < len(raw):
            (tlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            term = raw[off:off + tlen].decode("utf-8")
            off += tlen
            (n,) = struct.unpack_from("<I", raw, off)
            off += 4
            plist = list(struct.iter_unpack("<II", raw[off:off + 8 * n]))
            off += 8 * n
            postings[term] = plist
        return cls(postings, meta["doc_count"], doc_norms, title_map)


def build_index(corpus: CorpusStore) -> InvertedIndex:
    postings: dict[str, dict[int, int]] = {}
    doc_terms: dict[int, dict[str, int]] = {}
    title_map: dict[str, int] = {}
    for doc in corpus.documents:
        counts: dict[str, int] = {}
        for term in document_terms([corpus.surfaces(s) for s in doc.sentences]):
            counts[term] = counts.get(term, 0) + 1
        doc_terms[doc.doc_id] = counts
        for term, tf in counts.items():
            postings.setdefault(term, {})[doc.doc_id] = tf
        title_map[doc.title] = doc.doc_id
    doc_count = len(corpus.documents)
    sorted_postings = {t: sorted(p.items()) for t, p in postings.items()}
    index = InvertedIndex(sorted_postings, doc_count, {}, title_map)
    for doc_id, counts in doc_terms.items():
        norm_sq = 0.0
        for term, tf in counts.items():
            w = (1.0 + math.log(tf)) * index.idf(term)
            norm_sq += w * w
        index.doc_norms[doc_id] = math.sqrt(norm_sq)
    return index


def score(index: InvertedIndex, query_terms: Sequence[str]) -> list[tuple[int, float]]:
    """Rank documents for the query terms; zero-scoring docs are suppressed."""
    scores: dict[int, float] = {}
    for term in query_terms:
        plist = index.postings.get(term)
        if not plist:
            continue
        idf_sq = index.idf(term) ** 2
        if idf_sq == 0.0:
            continue
        for doc_id, tf in plist:
            scores[doc_id] = scores.get(doc_id, 0.0) + (1.0 + math.log(tf)) * idf_sq
    ranked = []
    for doc_id, s in scores.items():
        norm = index.doc_norms.get(doc_id, 0.0)
        if norm > 0.0 and s > 0.0:
            ranked.append((doc_id, s / norm))
    ranked.sort(key=lambda pair: (-pair[1], pair[0]))
    return ranked


def query_terms_from_text(tokens: Sequence[str]) -> list[str]:
    """Unigrams plus bigrams over one token sequence."""
    return document_terms([tokens])


def build_ir_query(query) -> list[str]:
    """Terms for a cloze query: the subject string when present, otherwise
    the question tokens with the mask removed."""
    if query.subject:
        return query_terms_from_text(tokenize(normalize(query.subject)))
    tokens = [t for t in query.tokens if t != query.mask_token]
    return query_terms_from_text(tokens)


def retrieve(index: InvertedIndex, query, config: IrQueryConfig) -> list[int]:
    """Top documents for a cloze query.  With the shortcut enabled, a subject
    exactly matching a document title returns just that document."""
    return retrieve_ranked(index, query, config, config.top_n)


def retrieve_ranked(index: InvertedIndex, query, config: IrQueryConfig,
                    top_n: int) -> list[int]:
    if config.use_subject_shortcut and query.subject:
        doc_id = index.title_map.get(normalize(query.subject))
        if doc_id is not None:
            return [doc_id]
    ranked = score(index, build_ir_query(query))
    return [doc_id for doc_id, _ in ranked[:top_n]]
