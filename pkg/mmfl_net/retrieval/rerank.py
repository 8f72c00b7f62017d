"""k-reciprocal re-ranking."""

from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np

from ..const import DEFAULT_RERANK_K1, DEFAULT_RERANK_K2, DEFAULT_RERANK_LAMBDA
from ..exceptions import ArgumentError
from .evaluation import distance_matrix

if TYPE_CHECKING:
    from .embeddings import EmbeddingStore


def _reciprocal(initial_rank: np.ndarray, index: int, k: int) -> np.ndarray:
    """Return the members of index's top k+1 that rank index in their own top k+1."""
    forward = initial_rank[index, : k + 1]
    backward = initial_rank[forward, : k + 1]
    return forward[np.flatnonzero((backward == index).any(axis=1))]


def k_reciprocal_rerank(
    q_g_dist: np.ndarray,
    q_q_dist: np.ndarray,
    g_g_dist: np.ndarray,
    k1: int = DEFAULT_RERANK_K1,
    k2: int = DEFAULT_RERANK_K2,
    lambda_value: float = DEFAULT_RERANK_LAMBDA,
) -> np.ndarray:
    """
    Blend the original distance with a Jaccard distance over expanded neighbor sets.

    Distances are squared and scaled per row by their maximum. Each item's
    k1-reciprocal set is expanded by the half-size reciprocal sets of its
    members that overlap it by more than two thirds, weighted by exp(-d) and
    averaged over the item's k2 nearest neighbors. The result is
    lambda * original + (1 - lambda) * (1 - sum(min) / sum(max)).
    """
    num_query, num_gallery = q_g_dist.shape
    if not k2 < k1 < num_gallery:
        raise ArgumentError(
            f"Re-ranking needs k2 < k1 < gallery size, got k1={k1}, k2={k2}, "
            f"gallery={num_gallery}"
        )
    original = np.block([[q_q_dist, q_g_dist], [q_g_dist.T, g_g_dist]])
    original = np.power(original.astype(np.float64), 2)
    row_max = original.max(axis=1, keepdims=True)
    original = original / np.where(row_max > 0, row_max, 1.0)
    total = original.shape[0]
    initial_rank = np.argsort(original, axis=1, kind="stable")

    weights = np.zeros_like(original)
    half = int(np.around(k1 / 2.0))
    for index in range(total):
        reciprocal = _reciprocal(initial_rank, index, k1)
        expansion = reciprocal
        for candidate in reciprocal:
            candidate_set = _reciprocal(initial_rank, int(candidate), half)
            overlap = len(np.intersect1d(candidate_set, reciprocal))
            if overlap > 2.0 / 3 * len(candidate_set):
                expansion = np.append(expansion, candidate_set)
        expansion = np.unique(expansion)
        weight = np.exp(-original[index, expansion])
        weights[index, expansion] = weight / weight.sum()

    if k2 != 1:
        weights = np.stack(
            [weights[initial_rank[index, :k2]].mean(axis=0) for index in range(total)]
        )

    jaccard = np.zeros((num_query, total), dtype=np.float64)
    for index in range(num_query):
        minimum = np.minimum(weights[index], weights).sum(axis=1)
        maximum = np.maximum(weights[index], weights).sum(axis=1)
        jaccard[index] = 1.0 - minimum / np.where(maximum > 0, maximum, 1.0)

    final = lambda_value * original[:num_query] + (1 - lambda_value) * jaccard
    return final[:, num_query:]


def rerank_stores(
    query: EmbeddingStore,
    gallery: EmbeddingStore,
    k1: int = DEFAULT_RERANK_K1,
    k2: int = DEFAULT_RERANK_K2,
    lambda_value: float = DEFAULT_RERANK_LAMBDA,
) -> np.ndarray:
    """Re-rank the cosine distances between two stores."""
    return k_reciprocal_rerank(
        distance_matrix(query, gallery),
        distance_matrix(query, query),
        distance_matrix(gallery, gallery),
        k1,
        k2,
        lambda_value,
    )
