"""Embedding extraction, evaluation and search."""

from .attributes import AttributeReport, attribute_metrics, predict_attributes
from .embeddings import EmbeddingStore, extract_embeddings
from .evaluation import EvalResult, compute_cmc_map, cosine_distances, distance_matrix
from .index import QueryHit, RetrievalIndex, build_index, query_index
from .protocol import EvalSettings, evaluate_model, protocol_split, score_stores
from .rerank import k_reciprocal_rerank, rerank_stores

__all__ = [
    "AttributeReport",
    "EmbeddingStore",
    "EvalResult",
    "EvalSettings",
    "QueryHit",
    "RetrievalIndex",
    "attribute_metrics",
    "build_index",
    "compute_cmc_map",
    "cosine_distances",
    "distance_matrix",
    "evaluate_model",
    "extract_embeddings",
    "k_reciprocal_rerank",
    "predict_attributes",
    "protocol_split",
    "query_index",
    "rerank_stores",
    "score_stores",
]
