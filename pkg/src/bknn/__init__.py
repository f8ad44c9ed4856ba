"""Masked-context retrieval pipeline: corpus ingestion, context-embedding
datastore, TF-IDF document retrieval, kNN token distributions, LM
interpolation, and a cloze evaluation harness."""

from .ann import IvfConfig, IvfIndex, ann_search, populate, train
from .corpus import CorpusStore, Vocabulary, normalize, split_sentences, tokenize
from .datastore import Datastore, append, build, import_exchange
from .embedder import DEFAULT_MASK_TOKEN, EmbedderConfig, ReferenceEmbedder
from .errors import BknnError, DataFormatError, InternalError, UsageError
from .evaluation import (
    EvalReport,
    FactTriple,
    GridSpec,
    evaluate,
    grid_search,
    instantiate,
    load_dataset,
    mean_precision,
    precision_at,
)
from .ir_index import InvertedIndex, IrQueryConfig, build_index, retrieve, score
from .knn import KnnConfig, Neighbor, knn, neighbors_to_distribution
from .pipeline import (
    Artifacts,
    CandidateVocabulary,
    ClozeQuery,
    ImportedLm,
    InterpolationConfig,
    StubLm,
    answer,
    interpolate,
    parse_cloze_text,
)

__all__ = [
    "Artifacts", "BknnError", "CandidateVocabulary", "ClozeQuery", "CorpusStore",
    "DataFormatError", "Datastore", "DEFAULT_MASK_TOKEN", "EmbedderConfig",
    "EvalReport", "FactTriple", "GridSpec", "ImportedLm", "InternalError",
    "InterpolationConfig", "InvertedIndex", "IrQueryConfig", "IvfConfig",
    "IvfIndex", "KnnConfig", "Neighbor", "ReferenceEmbedder", "StubLm",
    "UsageError", "Vocabulary", "ann_search", "answer", "append", "build",
    "build_index", "evaluate", "grid_search", "import_exchange", "instantiate",
    "interpolate", "knn", "load_dataset", "mean_precision",
    "neighbors_to_distribution", "normalize", "parse_cloze_text", "populate",
    "precision_at", "retrieve", "score", "split_sentences", "tokenize", "train",
]
