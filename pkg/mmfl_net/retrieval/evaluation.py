"""Cosine distances and CMC/mAP evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np

from ..const import REPORTED_RANKS
from ..exceptions import EmbeddingStoreError

if TYPE_CHECKING:
    from collections.abc import Sequence
    from pathlib import Path

    from .embeddings import EmbeddingStore

_LOGGER = logging.getLogger(__name__)


def cosine_distances(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Return 1 - cosine similarity of one unit vector against unit rows, in [0, 2]."""
    similarity = (gallery.astype(np.float64) * query.astype(np.float64)).sum(axis=1)
    return np.clip(1.0 - similarity, 0.0, 2.0)


def check_comparable(query: EmbeddingStore, gallery: EmbeddingStore) -> None:
    """Raise unless both stores share a width and hold unit rows."""
    if query.dim != gallery.dim:
        raise EmbeddingStoreError(
            f"Query width {query.dim} does not match gallery width {gallery.dim}"
        )
    if not (query.normalized and gallery.normalized):
        raise EmbeddingStoreError("Cosine distances need L2-normalized stores")


def distance_matrix(query: EmbeddingStore, gallery: EmbeddingStore) -> np.ndarray:
    """Return the (Q, G) cosine distance matrix."""
    check_comparable(query, gallery)
    if len(query) == 0 or len(gallery) == 0:
        return np.zeros((len(query), len(gallery)), dtype=np.float64)
    return np.stack([cosine_distances(row, gallery.matrix) for row in query.matrix])


@dataclass
class EvalResult:
    """mAP, the CMC curve over every gallery rank and per-query APs."""

    mAP: float
    cmc: list[float]
    aps: list[float] = field(default_factory=list)
    num_queries: int = 0
    excluded: int = 0

    def acc(self, rank: int) -> float:
        """Return Acc@rank, saturating at the gallery size."""
        if not self.cmc:
            return 0.0
        return self.cmc[min(rank, len(self.cmc)) - 1]

    def summary(self, ranks: Sequence[int] = REPORTED_RANKS) -> dict[str, float]:
        """Return mAP and Acc@k for the reported ranks."""
        return {"mAP": self.mAP} | {f"acc@{rank}": self.acc(rank) for rank in ranks}

    def as_json(self) -> dict[str, Any]:
        """Serialize the full result with its summary."""
        return asdict(self) | {"summary": self.summary()}

    def write(self, path: Path) -> None:
        """Write the JSON report."""
        path.write_text(json.dumps(self.as_json(), indent=2) + "\n", encoding="utf-8")


def compute_cmc_map(
    distmat: np.ndarray,
    query_pids: Sequence[int] | np.ndarray,
    gallery_pids: Sequence[int] | np.ndarray,
) -> EvalResult:
    """
    Rank the gallery per query and score it.

    Ties are broken by ascending gallery index. Queries without a relevant
    gallery item are excluded from mAP and CMC and counted in `excluded`.
    """
    query_pids = np.asarray(query_pids)
    gallery_pids = np.asarray(gallery_pids)
    num_queries, num_gallery = distmat.shape
    order = np.argsort(distmat, axis=1, kind="stable")
    curves = []
    aps = []
    for index in range(num_queries):
        matches = gallery_pids[order[index]] == query_pids[index]
        if not matches.any():
            continue
        curves.append(np.minimum(np.cumsum(matches), 1))
        ranks = np.flatnonzero(matches) + 1
        aps.append(float(np.mean(np.arange(1, len(ranks) + 1) / ranks)))
    excluded = num_queries - len(aps)
    if excluded:
        _LOGGER.warning("%d of %d queries have no gallery match", excluded, num_queries)
    if not aps:
        return EvalResult(
            mAP=0.0, cmc=[0.0] * num_gallery, num_queries=num_queries, excluded=excluded
        )
    cmc = np.mean(np.stack(curves).astype(np.float64), axis=0)
    return EvalResult(
        mAP=float(np.mean(aps)),
        cmc=[float(value) for value in cmc],
        aps=aps,
        num_queries=num_queries,
        excluded=excluded,
    )
