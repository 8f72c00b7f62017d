"""Tests for k-reciprocal re-ranking."""

from __future__ import annotations

import numpy as np
import pytest

from mmfl_net.exceptions import ArgumentError
from mmfl_net.retrieval.evaluation import compute_cmc_map, distance_matrix
from mmfl_net.retrieval.rerank import k_reciprocal_rerank, rerank_stores

from . import make_store, random_unit_rows, reference_rerank


def _distances(
    seed: int, num_query: int = 4, num_gallery: int = 10, dim: int = 5
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cosine distances between random unit queries and gallery rows."""
    rng = np.random.default_rng(seed)
    query = make_store(random_unit_rows(rng, num_query, dim), normalize=False)
    gallery = make_store(random_unit_rows(rng, num_gallery, dim), normalize=False)
    return (
        distance_matrix(query, gallery),
        distance_matrix(query, query),
        distance_matrix(gallery, gallery),
    )


@pytest.mark.parametrize(("k1", "k2"), [(5, 2), (6, 1), (8, 3)])
def test_matches_reference(k1: int, k2: int) -> None:
    """The vectorized result equals a set-based reference within 1e-6."""
    for seed in range(5):
        q_g, q_q, g_g = _distances(seed)
        final = k_reciprocal_rerank(q_g, q_q, g_g, k1, k2, 0.3)
        expected = reference_rerank(q_g, q_q, g_g, k1, k2, 0.3)
        assert final.shape == (4, 10)
        assert np.allclose(final, expected, atol=1e-6)


def test_lambda_one_keeps_the_order() -> None:
    """With lambda 1 only the scaled original distance remains."""
    q_g, q_q, g_g = _distances(7)
    final = k_reciprocal_rerank(q_g, q_q, g_g, 5, 2, 1.0)
    assert np.array_equal(
        np.argsort(final, axis=1, kind="stable"), np.argsort(q_g, axis=1, kind="stable")
    )


def test_distances_stay_in_unit_range() -> None:
    """Scaled distances and Jaccard distances both lie in [0, 1]."""
    q_g, q_q, g_g = _distances(3, num_query=6, num_gallery=15)
    for lambda_value in (0.0, 0.3, 0.7):
        final = k_reciprocal_rerank(q_g, q_q, g_g, 6, 2, lambda_value)
        assert np.all(np.isfinite(final))
        assert np.all((final >= 0) & (final <= 1 + 1e-12))


def test_duplicate_of_query_ranks_first() -> None:
    """A gallery copy of a query shares its neighborhood and ranks first."""
    rng = np.random.default_rng(11)
    queries = random_unit_rows(rng, 3, 6)
    gallery = random_unit_rows(rng, 9, 6)
    gallery[4] = queries[0]
    final = rerank_stores(
        make_store(queries, normalize=False), make_store(gallery, normalize=False), 5, 2
    )
    assert int(np.argmin(final[0])) == 4


def test_rerank_stores_uses_cosine_distances() -> None:
    """Store re-ranking equals re-ranking the three distance matrices."""
    rng = np.random.default_rng(5)
    query = make_store(random_unit_rows(rng, 3, 4), normalize=False)
    gallery = make_store(random_unit_rows(rng, 8, 4), normalize=False)
    expected = k_reciprocal_rerank(
        distance_matrix(query, gallery),
        distance_matrix(query, query),
        distance_matrix(gallery, gallery),
        4,
        2,
        0.3,
    )
    assert np.array_equal(rerank_stores(query, gallery, 4, 2, 0.3), expected)


@pytest.mark.parametrize(("k1", "k2"), [(3, 3), (2, 4), (10, 2), (12, 2)])
def test_invalid_neighborhoods(k1: int, k2: int) -> None:
    """k2 < k1 < gallery size is required."""
    q_g, q_q, g_g = _distances(0)
    with pytest.raises(ArgumentError):
        k_reciprocal_rerank(q_g, q_q, g_g, k1, k2)


def _grouped_distances(
    groups: list[list[int]], within: list[float], size: int
) -> np.ndarray:
    """Distance 1.0 everywhere except inside each group."""
    distances = np.ones((size, size))
    for members, distance in zip(groups, within, strict=True):
        for row in members:
            distances[row, members] = distance
    np.fill_diagonal(distances, 0.0)
    return distances


def test_rerank_demotes_hard_distractor() -> None:
    """A distractor outside the reciprocal neighborhood loses its top rank."""
    # Queries 0-2, then gallery: two matches of pid 0, two of pid 1, one of
    # pid 2 and three tightly clustered distractors.
    full = _grouped_distances(
        [[0, 3, 4], [1, 5, 6], [2, 7], [8, 9, 10]], [0.3, 0.3, 0.3, 0.1], 11
    )
    full[0, 8] = full[8, 0] = 0.2
    q_q, q_g, g_g = full[:3, :3], full[:3, 3:], full[3:, 3:]
    query_pids = [0, 1, 2]
    gallery_pids = [0, 0, 1, 1, 2, 9, 9, 9]

    original = compute_cmc_map(q_g, query_pids, gallery_pids)
    reranked = compute_cmc_map(
        k_reciprocal_rerank(q_g, q_q, g_g, 2, 1, 0.3), query_pids, gallery_pids
    )

    assert original.cmc[0] < 1.0
    assert reranked.mAP > original.mAP
    assert reranked.mAP == pytest.approx(1.0)
