"""Consumer-to-shop evaluation protocol."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

from ..const import Domain, Split
from ..data.manifest import select
from .embeddings import extract_embeddings
from .evaluation import compute_cmc_map, distance_matrix
from .rerank import rerank_stores

if TYPE_CHECKING:
    from collections.abc import Mapping, Sequence

    import torch

    from ..data.manifest import ImageRecord
    from ..data.transforms import RecordTransform
    from ..network.model import MMFLNet
    from .embeddings import EmbeddingStore
    from .evaluation import EvalResult

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalSettings:
    """Extraction batch size and re-ranking switches."""

    batch_size: int = 32
    rerank: bool = False
    k1: int = 20
    k2: int = 6
    lambda_value: float = 0.3

    @classmethod
    def from_config(cls, section: Mapping[str, Any]) -> EvalSettings:
        """Build from the `eval` config section."""
        return cls(
            batch_size=section["batch_size"],
            rerank=section["rerank"],
            k1=section["k1"],
            k2=section["k2"],
            lambda_value=section["lambda"],
        )


def protocol_split(
    records: Sequence[ImageRecord],
) -> tuple[list[ImageRecord], list[ImageRecord], str]:
    """
    Return (queries, gallery, protocol name).

    Query consumer records against gallery shop records when the manifest has
    them, otherwise training consumer records against training shop records.
    """
    queries = select(records, Split.QUERY, Domain.CONSUMER)
    gallery = select(records, Split.GALLERY, Domain.SHOP)
    if queries and gallery:
        return queries, gallery, "test"
    return (
        select(records, Split.TRAIN, Domain.CONSUMER),
        select(records, Split.TRAIN, Domain.SHOP),
        "train",
    )


def score_stores(
    query: EmbeddingStore, gallery: EmbeddingStore, settings: EvalSettings
) -> EvalResult:
    """Compute distances, optionally re-rank, and evaluate."""
    if settings.rerank:
        distances = rerank_stores(
            query, gallery, settings.k1, settings.k2, settings.lambda_value
        )
    else:
        distances = distance_matrix(query, gallery)
    return compute_cmc_map(distances, query.pids, gallery.pids)


def evaluate_model(
    model: MMFLNet,
    records: Sequence[ImageRecord],
    transform: RecordTransform,
    settings: EvalSettings,
    device: torch.device | str = "cpu",
) -> EvalResult:
    """Extract both sides of the protocol and evaluate."""
    queries, gallery, protocol = protocol_split(records)
    batch_size = settings.batch_size
    query_store = extract_embeddings(model, queries, transform, batch_size, device)
    gallery_store = extract_embeddings(model, gallery, transform, batch_size, device)
    result = score_stores(query_store, gallery_store, settings)
    _LOGGER.info(
        "Evaluated %d queries against %d gallery images (%s protocol): "
        "mAP %.4f, Acc@1 %.4f",
        len(queries),
        len(gallery),
        protocol,
        result.mAP,
        result.acc(1),
    )
    return result
