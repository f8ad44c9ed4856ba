"""Corpus ingestion: normalization, tokenization, sentence splitting, the
shared vocabulary, and the on-disk corpus store.

The store is a directory::

    <dir>/manifest.json   versioned manifest (magic "BKNN-CORPUS\\n1")
    <dir>/vocab.txt       one surface form per line; line number = token id
    <dir>/docs.jsonl      one tokenized document per line

Ingestion is single-writer; after ingestion the store is immutable and safe
to share across readers.  Appending new documents extends docs.jsonl and the
vocabulary without renumbering existing ids.
"""

from __future__ import annotations

import json
import re
import unicodedata
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .errors import DataFormatError

CORPUS_MAGIC = "BKNN-CORPUS\n1"

_WS_RE = re.compile(r"\s+")

# ASCII punctuation split off token edges; '-' is excluded so hyphenated
# words stay whole.
_EDGE_PUNCT = set("!\"#$%&'()*+,./:;<=>?@[\\]^_`{|}~")

_SENT_END = ".!?"


def _load_abbreviations() -> frozenset[str]:
    text = resources.files("bknn").joinpath("data/abbreviations.txt").read_text("utf-8")
    return frozenset(line.strip() for line in text.splitlines() if line.strip())


_ABBREVIATIONS = _load_abbreviations()


def normalize(text: str) -> str:
    """Canonicalize raw text: NFC, lowercase, control characters stripped,
    whitespace runs collapsed to single spaces, ends trimmed."""
    t = unicodedata.normalize("NFC", text).lower()
    t = "".join(
        ch for ch in t
        if not (unicodedata.category(ch) in ("Cc", "Cf") and not ch.isspace())
    )
    return _WS_RE.sub(" ", t).strip()


def tokenize(text: str) -> list[str]:
    """Split normalized text into surface tokens.

    Whitespace-delimited chunks, with leading/trailing punctuation split into
    single-character tokens.  Interior punctuation (hyphens, "u.s",
    "don't") is kept inside the token.
    """
    tokens: list[str] = []
    for chunk in text.split():
        lead: list[str] = []
        trail: list[str] = []
        while chunk and chunk[0] in _EDGE_PUNCT:
            lead.append(chunk[0])
            chunk = chunk[1:]
        while chunk and chunk[-1] in _EDGE_PUNCT:
            trail.append(chunk[-1])
            chunk = chunk[:-1]
        tokens.extend(lead)
        if chunk:
            tokens.append(chunk)
        tokens.extend(reversed(trail))
    return tokens


def split_sentences(text: str) -> list[tuple[int, int]]:
    """Return (start, end) character spans of sentences in normalized text.

    A boundary is a '.', '!' or '?' followed by a space and a letter, unless
    the word ending at the punctuation mark is on the abbreviation guard
    list.  Spans cover the text except for the single separating spaces.
    """
    if not text:
        return []
    spans: list[tuple[int, int]] = []
    start = 0
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch in _SENT_END and i + 2 < n and text[i + 1] == " " and text[i + 2].isalpha():
            word_start = text.rfind(" ", start, i) + 1
            if word_start <= start:
                word_start = start
            if text[word_start:i + 1] not in _ABBREVIATIONS:
                spans.append((start, i + 1))
                start = i + 2
                i += 2
                continue
        i += 1
    if start < n:
        spans.append((start, n))
    return spans


class Vocabulary:
    """Bijection between token ids [0, size) and normalized surface forms."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._tokens: list[str] = []
        self._lookup: dict[str, int] = {}
        for t in tokens:
            self.add(t)

    def add(self, surface: str) -> int:
        """Return the id of ``surface``, adding it if unseen."""
        tid = self._lookup.get(surface)
        if tid is None:
            tid = len(self._tokens)
            self._tokens.append(surface)
            self._lookup[surface] = tid
        return tid

    def id_of(self, surface: str) -> int | None:
        return self._lookup.get(surface)

    def surface(self, token_id: int) -> str:
        return self._tokens[token_id]

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, surface: str) -> bool:
        return surface in self._lookup

    def save(self, path: Path | str) -> None:
        Path(path).write_text("".join(t + "\n" for t in self._tokens), "utf-8")

    @classmethod
    def load(cls, path: Path | str) -> "Vocabulary":
        text = Path(path).read_text("utf-8")
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        vocab = cls()
        for line in lines:
            vocab.add(line)
        if len(vocab) != len(lines):
            raise DataFormatError(f"duplicate surface form in vocabulary file {path}")
        return vocab


@dataclass(frozen=True)
class Sentence:
    tokens: tuple[int, ...]
    char_span: tuple[int, int]


@dataclass(frozen=True)
class Document:
    doc_id: int
    title: str
    body: str                      # normalized body
    sentences: tuple[Sentence, ...]


@dataclass(frozen=True)
class Occurrence:
    doc_id: int
    sentence_index: int
    token_index: int
    token_id: int


def _tokenize_document(title: str, body: str, vocab: Vocabulary, doc_id: int) -> Document:
    norm_body = normalize(body)
    sentences = []
    for span in split_sentences(norm_body):
        surfaces = tokenize(norm_body[span[0]:span[1]])
        if not surfaces:
            continue
        sentences.append(Sentence(tuple(vocab.add(s) for s in surfaces), span))
    return Document(doc_id=doc_id, title=normalize(title), body=norm_body,
                    sentences=tuple(sentences))


class CorpusStore:
    """Directory-backed immutable corpus plus its vocabulary."""

    def __init__(self, directory: Path, documents: list[Document], vocab: Vocabulary):
        self.directory = directory
        self.documents = documents
        self.vocab = vocab
        self._title_index = {d.title: d.doc_id for d in documents}

    # -- construction ------------------------------------------------------

    @classmethod
    def ingest(cls, docs: Iterable[tuple[str, str]], out_dir: Path | str) -> "CorpusStore":
        """Build a store from (title, body) pairs, assigning doc ids in input
        order.  Duplicate normalized titles are rejected."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        vocab = Vocabulary()
        documents: list[Document] = []
        seen_titles: set[str] = set()
        with open(out / "docs.jsonl", "w", encoding="utf-8") as fh:
            for title, body in docs:
                doc = _tokenize_document(title, body, vocab, doc_id=len(documents))
                if doc.title in seen_titles:
                    raise DataFormatError(f"duplicate document title: {title!r}")
                seen_titles.add(doc.title)
                fh.write(_doc_to_json(doc) + "\n")
                documents.append(doc)
        vocab.save(out / "vocab.txt")
        store = cls(out, documents, vocab)
        store._write_manifest()
        return store

    def append_documents(self, docs: Iterable[tuple[str, str]]) -> list[int]:
        """Append new documents, extending the vocabulary.  Existing ids are
        unchanged.  Returns the new doc ids."""
        new_ids: list[int] = []
        with open(self.directory / "docs.jsonl", "a", encoding="utf-8") as fh:
            for title, body in docs:
                doc = _tokenize_document(title, body, self.vocab, doc_id=len(self.documents))
                if doc.title in self._title_index:
                    raise DataFormatError(f"duplicate document title: {title!r}")
                fh.write(_doc_to_json(doc) + "\n")
                self.documents.append(doc)
                self._title_index[doc.title] = doc.doc_id
                new_ids.append(doc.doc_id)
        self.vocab.save(self.directory / "vocab.txt")
        self._write_manifest()
        return new_ids

    def _write_manifest(self) -> None:
        manifest = {
            "magic": CORPUS_MAGIC,
            "doc_count": len(self.documents),
            "sentence_count": sum(len(d.sentences) for d in self.documents),
            "token_count": sum(len(s.tokens) for d in self.documents for s in d.sentences),
            "vocab_size": len(self.vocab),
            "normalization": {"unicode": "NFC", "lowercase": True,
                              "collapse_whitespace": True},
        }
        (self.directory / "manifest.json").write_text(
            json.dumps(manifest, sort_keys=True, indent=1) + "\n", "utf-8")

    # -- access ------------------------------------------------------------

    @classmethod
    def open(cls, directory: Path | str) -> "CorpusStore":
        d = Path(directory)
        manifest_path = d / "manifest.json"
        if not manifest_path.exists():
            raise DataFormatError(f"not a corpus store (missing manifest): {d}")
        manifest = json.loads(manifest_path.read_text("utf-8"))
        if manifest.get("magic") != CORPUS_MAGIC:
            raise DataFormatError(f"bad corpus magic in {manifest_path}")
        vocab = Vocabulary.load(d / "vocab.txt")
        documents: list[Document] = []
        with open(d / "docs.jsonl", encoding="utf-8") as fh:
            for line in fh:
                documents.append(_doc_from_json(line))
        if len(documents) != manifest["doc_count"]:
            raise DataFormatError(
                f"corpus store {d}: manifest says {manifest['doc_count']} docs, "
                f"found {len(documents)} (incomplete ingest?)")
        return cls(d, documents, vocab)

    def document(self, doc_id: int) -> Document:
        if not 0 <= doc_id < len(self.documents):
            raise DataFormatError(f"unknown doc_id {doc_id}")
        return self.documents[doc_id]

    def doc_id_by_title(self, normalized_title: str) -> int | None:
        return self._title_index.get(normalized_title)

    def occurrences(self, doc_ids: Sequence[int] | None = None) -> Iterator[Occurrence]:
        """Yield every token position in corpus order.  Punctuation and
        stopword-class tokens are included; filtering is a query-time
        concern."""
        docs = self.documents if doc_ids is None else [self.document(i) for i in doc_ids]
        for doc in docs:
            for si, sent in enumerate(doc.sentences):
                for ti, tid in enumerate(sent.tokens):
                    yield Occurrence(doc.doc_id, si, ti, tid)

    def surfaces(self, sentence: Sentence) -> list[str]:
        return [self.vocab.surface(t) for t in sentence.tokens]


def _doc_to_json(doc: Document) -> str:
    return json.dumps({
        "doc_id": doc.doc_id,
        "title": doc.title,
        "body": doc.body,
        "sentences": [{"tokens": list(s.tokens), "span": list(s.char_span)}
                      for s in doc.sentences],
    }, sort_keys=True, ensure_ascii=False)


def _doc_from_json(line: str) -> Document:
    try:
        raw = json.loads(line)
        return Document(
            doc_id=raw["doc_id"],
            title=raw["title"],
            body=raw["body"],
            sentences=tuple(Sentence(tuple(s["tokens"]), tuple(s["span"]))
                            for s in raw["sentences"]),
        )
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataFormatError(f"malformed document record: {exc}") from exc


def read_documents_jsonl(path: Path | str) -> Iterator[tuple[str, str]]:
    """Read raw corpus input: JSON-lines of {"title": ..., "text": ...}."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                yield row["title"], row["text"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataFormatError(f"{path}:{lineno}: bad document row: {exc}") from exc
