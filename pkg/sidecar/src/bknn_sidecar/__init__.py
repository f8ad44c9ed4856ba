"""Transformer-side exporter for the bknn exchange formats."""

from .exports import export_embeddings, export_lm_predictions, export_query_embeddings
from .extract import Extractor, SidecarConfig
from .formats import Corpus, DatastoreWriter, read_corpus

__all__ = [
    "Corpus", "DatastoreWriter", "Extractor", "SidecarConfig",
    "export_embeddings", "export_lm_predictions", "export_query_embeddings",
    "read_corpus",
]
