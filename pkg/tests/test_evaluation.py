"""Tests for cosine distances and CMC/mAP scoring."""

from __future__ import annotations

import json
import logging
from typing import TYPE_CHECKING

import numpy as np
import pytest

from mmfl_net.const import Split
from mmfl_net.exceptions import EmbeddingStoreError
from mmfl_net.retrieval.evaluation import (
    EvalResult,
    compute_cmc_map,
    cosine_distances,
    distance_matrix,
)
from mmfl_net.retrieval.protocol import EvalSettings, protocol_split, score_stores

from . import brute_force_cmc_map, make_records, make_store, random_unit_rows

if TYPE_CHECKING:
    from pathlib import Path


def test_cosine_distance_extremes() -> None:
    """Identical, orthogonal and opposite unit vectors lie at 0, 1 and 2."""
    query = np.array([1.0, 0.0], dtype=np.float32)
    gallery = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]], dtype=np.float32)
    assert np.allclose(cosine_distances(query, gallery), [0.0, 1.0, 2.0])


def test_distance_matrix_is_in_range() -> None:
    """Random unit stores give distances in [0, 2] equal to 1 - dot product."""
    rng = np.random.default_rng(0)
    query = make_store(random_unit_rows(rng, 7, 5))
    gallery = make_store(random_unit_rows(rng, 9, 5))
    distances = distance_matrix(query, gallery)
    assert distances.shape == (7, 9)
    assert np.all((distances >= 0) & (distances <= 2))
    assert np.allclose(distances, 1 - query.matrix @ gallery.matrix.T, atol=1e-6)


def test_distance_matrix_checks() -> None:
    """Stores must share a width and hold unit rows."""
    rng = np.random.default_rng(1)
    with pytest.raises(EmbeddingStoreError, match="width"):
        distance_matrix(make_store(rng.random((2, 3))), make_store(rng.random((2, 4))))
    with pytest.raises(EmbeddingStoreError, match="normalized"):
        distance_matrix(
            make_store(rng.random((2, 3)) + 1, normalize=False),
            make_store(rng.random((2, 3))),
        )


def test_single_query_average_precision() -> None:
    """Matches at ranks 1 and 3 score AP (1 + 2/3) / 2."""
    result = compute_cmc_map(np.array([[0.1, 0.2, 0.3, 0.4]]), [7], [7, 1, 7, 2])
    assert result.mAP == pytest.approx(5 / 6)
    assert result.cmc == [1.0, 1.0, 1.0, 1.0]
    assert result.aps == [pytest.approx(5 / 6)]


def test_ties_break_by_gallery_index() -> None:
    """Equal distances rank the lower gallery index first."""
    result = compute_cmc_map(np.zeros((1, 3)), [5], [1, 5, 5])
    assert result.cmc == [0.0, 1.0, 1.0]
    assert result.mAP == pytest.approx((1 / 2 + 2 / 3) / 2)


def test_matches_brute_force() -> None:
    """Vectorized scoring equals a per-query loop on random tied problems."""
    rng = np.random.default_rng(2)
    tied = unmatched = 0
    for _ in range(200):
        num_query, num_gallery = rng.integers(1, 13, 2)
        distmat = np.round(rng.random((num_query, num_gallery)), 1)
        query_pids = rng.integers(0, 6, num_query).tolist()
        gallery_pids = rng.integers(0, 6, num_gallery).tolist()
        tied += any(len(set(row)) < len(row) for row in distmat.tolist())
        result = compute_cmc_map(distmat, query_pids, gallery_pids)
        expected_map, expected_cmc, excluded = brute_force_cmc_map(
            distmat, query_pids, gallery_pids
        )
        assert result.mAP == pytest.approx(expected_map, abs=1e-12)
        assert result.cmc == pytest.approx(expected_cmc, abs=1e-12)
        assert result.excluded == excluded
        unmatched += excluded
    assert tied > 0
    assert unmatched > 0


def test_cmc_is_monotone() -> None:
    """CMC never decreases and ends at one when every query has a match."""
    rng = np.random.default_rng(3)
    gallery_pids = list(range(10)) * 3
    result = compute_cmc_map(rng.random((10, 30)), list(range(10)), gallery_pids)
    assert all(a <= b for a, b in zip(result.cmc, result.cmc[1:], strict=False))
    assert result.cmc[-1] == 1.0
    assert 0.0 < result.mAP <= 1.0


def test_queries_without_match_are_excluded(caplog: pytest.LogCaptureFixture) -> None:
    """A query whose pid is absent from the gallery is counted and skipped."""
    with caplog.at_level(logging.WARNING):
        result = compute_cmc_map(np.array([[0.2, 0.1], [0.1, 0.2]]), [1, 9], [0, 1])
    assert result.excluded == 1
    assert result.num_queries == 2
    assert result.mAP == pytest.approx(1.0)
    assert "1 of 2 queries" in caplog.text
    empty = compute_cmc_map(np.zeros((1, 2)), [9], [0, 1])
    assert empty.mAP == 0.0
    assert empty.cmc == [0.0, 0.0]


def test_summary_saturates_at_gallery_size(tmp_path: Path) -> None:
    """Acc@k past the gallery size reports the last CMC value."""
    result = EvalResult(mAP=0.5, cmc=[0.25, 0.5, 1.0])
    assert result.summary() == {
        "mAP": 0.5,
        "acc@1": 0.25,
        "acc@10": 1.0,
        "acc@20": 1.0,
        "acc@50": 1.0,
    }
    assert EvalResult(mAP=0.0, cmc=[]).acc(1) == 0.0
    result.write(tmp_path / "eval.json")
    written = json.loads((tmp_path / "eval.json").read_text())
    assert written["cmc"] == [0.25, 0.5, 1.0]
    assert written["summary"]["acc@1"] == 0.25


def test_protocol_prefers_query_and_gallery() -> None:
    """Held-out consumers query shop galleries; otherwise training images are used."""
    train = make_records(3, 2)
    assert protocol_split(train)[2] == "train"
    held_out = make_records(2, 1, Split.QUERY) + make_records(2, 1, Split.GALLERY)
    queries, gallery, name = protocol_split(train + held_out)
    assert name == "test"
    assert {record.domain.value for record in queries} == {"consumer"}
    assert {record.domain.value for record in gallery} == {"shop"}
    assert len(queries) == len(gallery) == 2


def test_score_stores_with_and_without_reranking() -> None:
    """Identical query and gallery rows retrieve themselves first either way."""
    rng = np.random.default_rng(4)
    rows = random_unit_rows(rng, 12, 6)
    store = make_store(rows, pids=list(range(12)), normalize=False)
    plain = score_stores(store, store, EvalSettings())
    assert plain.acc(1) == 1.0
    reranked = score_stores(store, store, EvalSettings(rerank=True, k1=6, k2=2))
    assert reranked.acc(1) == 1.0
