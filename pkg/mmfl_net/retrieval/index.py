"""Cluster-probed retrieval index."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

from ..const import DEFAULT_KMEANS_MAX_ITER, DEFAULT_PROBE_CLUSTERS
from ..exceptions import ArgumentError, EmbeddingStoreError
from .embeddings import EmbeddingStore
from .evaluation import cosine_distances

_LOGGER = logging.getLogger(__name__)

STORE_FILE = "gallery.emb"
INDEX_FILE = "index.npz"


class QueryHit(NamedTuple):
    """One ranked gallery row."""

    row: int
    pid: int
    distance: float


@dataclass
class RetrievalIndex:
    """A store partitioned by k-means, searched over the nearest clusters."""

    store: EmbeddingStore
    centroids: np.ndarray
    assignments: np.ndarray
    probe_clusters: int = DEFAULT_PROBE_CLUSTERS
    inertia_history: list[float] = field(default_factory=list)

    @property
    def n_clusters(self) -> int:
        """Return the number of clusters."""
        return int(self.centroids.shape[0])

    def save(self, directory: Path | str) -> None:
        """Write the store and the clustering into a directory."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.store.save(directory / STORE_FILE)
        np.savez(
            directory / INDEX_FILE,
            centroids=self.centroids,
            assignments=self.assignments,
            probe_clusters=np.array(self.probe_clusters),
            inertia_history=np.array(self.inertia_history, dtype=np.float64),
        )

    @classmethod
    def load(cls, directory: Path | str) -> RetrievalIndex:
        """Read an index written by `save`."""
        directory = Path(directory)
        try:
            with np.load(directory / INDEX_FILE) as data:
                centroids = data["centroids"]
                assignments = data["assignments"]
                probe = int(data["probe_clusters"])
                history = [float(value) for value in data["inertia_history"]]
        except (OSError, KeyError) as err:
            raise EmbeddingStoreError(
                f"Cannot read index in {directory}: {err}"
            ) from err
        return cls(
            store=EmbeddingStore.load(directory / STORE_FILE),
            centroids=centroids,
            assignments=assignments,
            probe_clusters=probe,
            inertia_history=history,
        )


def farthest_point_init(matrix: np.ndarray, n_clusters: int, seed: int) -> np.ndarray:
    """Seeded first pick, then repeatedly the row farthest from all picks."""
    rng = np.random.default_rng(seed)
    picks = [int(rng.integers(matrix.shape[0]))]
    nearest = ((matrix - matrix[picks[0]]) ** 2).sum(axis=1)
    while len(picks) < n_clusters:
        pick = int(np.argmax(nearest))
        picks.append(pick)
        nearest = np.minimum(nearest, ((matrix - matrix[pick]) ** 2).sum(axis=1))
    return matrix[picks].copy()


def build_index(
    store: EmbeddingStore,
    n_clusters: int,
    seed: int = 0,
    probe_clusters: int = DEFAULT_PROBE_CLUSTERS,
    max_iter: int = DEFAULT_KMEANS_MAX_ITER,
) -> RetrievalIndex:
    """
    Cluster the store with Lloyd iterations from a farthest-point start.

    Iterations run one at a time so the inertia of every step is recorded;
    they stop at an assignment fixpoint or after `max_iter` steps.
    """
    if not 1 <= n_clusters <= len(store):
        raise ArgumentError(
            f"n_clusters must be in [1, {len(store)}], got {n_clusters}"
        )
    matrix = store.matrix.astype(np.float64)
    centroids = farthest_point_init(matrix, n_clusters, seed)
    assignments: np.ndarray | None = None
    history: list[float] = []
    for _ in range(max_iter):
        kmeans = KMeans(
            n_clusters=n_clusters,
            init=centroids,
            n_init=1,
            max_iter=1,
            algorithm="lloyd",
            random_state=seed,
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            labels = kmeans.fit_predict(matrix)
        centroids = kmeans.cluster_centers_
        history.append(float(kmeans.inertia_))
        if assignments is not None and np.array_equal(labels, assignments):
            break
        assignments = labels
    _LOGGER.debug(
        "Clustered %d rows into %d clusters in %d iterations",
        len(store),
        n_clusters,
        len(history),
    )
    return RetrievalIndex(
        store=store,
        centroids=centroids,
        assignments=np.asarray(labels, dtype=np.int64),
        probe_clusters=min(probe_clusters, n_clusters),
        inertia_history=history,
    )


def query_index(
    index: RetrievalIndex,
    embedding: np.ndarray,
    top_k: int,
    probe: int | None = None,
) -> list[QueryHit]:
    """Rank the members of the `probe` nearest clusters by cosine distance."""
    probe = index.probe_clusters if probe is None else probe
    if not 1 <= probe <= index.n_clusters:
        raise ArgumentError(f"probe must be in [1, {index.n_clusters}], got {probe}")
    embedding = np.asarray(embedding, dtype=np.float32).reshape(-1)
    to_centroids = ((index.centroids - embedding.astype(np.float64)) ** 2).sum(axis=1)
    nearest = np.argsort(to_centroids, kind="stable")[:probe]
    candidates = np.flatnonzero(np.isin(index.assignments, nearest))
    distances = cosine_distances(embedding, index.store.matrix[candidates])
    order = np.argsort(distances, kind="stable")[:top_k]
    return [
        QueryHit(
            row=int(candidates[position]),
            pid=index.store.pids[int(candidates[position])],
            distance=float(distances[position]),
        )
        for position in order
    ]
