"""Attribute prediction metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING, Any

import numpy as np
import torch
from sklearn.metrics import (
    accuracy_score,
    confusion_matrix,
    precision_recall_fscore_support,
    top_k_accuracy_score,
)
from torch.utils.data import DataLoader

from ..const import MISSING_ATTRIBUTE
from ..data.sampler import RecordDataset
from ..data.transforms import require_images
from ..exceptions import ArgumentError

if TYPE_CHECKING:
    from collections.abc import Sequence

    from ..data.manifest import AttributeSchema, ImageRecord
    from ..data.transforms import RecordTransform
    from ..network.model import MMFLNet

DEFAULT_TOP_K = (1, 3)


@dataclass
class AttributeReport:
    """Metrics of one attribute type; confusion rows are actual, columns predicted."""

    name: str
    support: int
    confusion: list[list[int]]
    accuracy: float
    top_k: dict[int, float]
    precision: float
    recall: float
    f1: float

    def as_json(self) -> dict[str, Any]:
        """Serialize with string top-k keys."""
        data = asdict(self)
        data["top_k"] = {str(k): value for k, value in self.top_k.items()}
        return data


def _top_k(targets: np.ndarray, scores: np.ndarray, k: int) -> float:
    """Top-k accuracy over all schema values."""
    num_values = scores.shape[1]
    if k >= num_values:
        return 1.0
    if num_values == 2:
        return float(top_k_accuracy_score(targets, scores[:, 1], k=k, labels=[0, 1]))
    return float(
        top_k_accuracy_score(targets, scores, k=k, labels=np.arange(num_values))
    )


def attribute_metrics(
    scores: Sequence[np.ndarray],
    targets: Sequence[np.ndarray],
    schema: AttributeSchema,
    ks: Sequence[int] = DEFAULT_TOP_K,
) -> list[AttributeReport]:
    """
    Score per-type predictions against targets.

    `scores[t]` is an (N, J_t) array of class scores for type t; unlabeled
    targets are skipped. Precision, recall and F1 are macro averages over the
    values that occur in the targets or the predictions.
    """
    if not len(scores) == len(targets) == len(schema.names):
        raise ArgumentError(
            "Need one score array and one target array per attribute type"
        )
    reports = []
    for name, count, type_scores, type_targets in zip(
        schema.names, schema.value_counts, scores, targets, strict=True
    ):
        type_scores = np.asarray(type_scores, dtype=np.float64)
        type_targets = np.asarray(type_targets, dtype=np.int64)
        if type_scores.shape[0] != type_targets.shape[0]:
            raise ArgumentError(
                f"{name}: {type_scores.shape[0]} predictions for "
                f"{type_targets.shape[0]} targets"
            )
        if type_scores.ndim != 2 or type_scores.shape[1] != count:
            raise ArgumentError(f"{name}: expected (N, {count}) scores")
        labeled = type_targets != MISSING_ATTRIBUTE
        y_true = type_targets[labeled]
        y_score = type_scores[labeled]
        if y_true.size == 0:
            reports.append(
                AttributeReport(
                    name=name,
                    support=0,
                    confusion=[[0] * count for _ in range(count)],
                    accuracy=0.0,
                    top_k={k: 0.0 for k in ks},
                    precision=0.0,
                    recall=0.0,
                    f1=0.0,
                )
            )
            continue
        y_pred = y_score.argmax(axis=1)
        confusion = confusion_matrix(y_true, y_pred, labels=np.arange(count))
        precision, recall, f1, _ = precision_recall_fscore_support(
            y_true, y_pred, average="macro", zero_division=0
        )
        reports.append(
            AttributeReport(
                name=name,
                support=int(y_true.size),
                confusion=confusion.tolist(),
                accuracy=float(accuracy_score(y_true, y_pred)),
                top_k={k: _top_k(y_true, y_score, k) for k in ks},
                precision=float(precision),
                recall=float(recall),
                f1=float(f1),
            )
        )
    return reports


def predict_attributes(
    model: MMFLNet,
    records: Sequence[ImageRecord],
    transform: RecordTransform,
    schema: AttributeSchema,
    batch_size: int = 32,
    device: torch.device | str = "cpu",
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Return per-type (N, J) branch-averaged probabilities and (N,) targets."""
    require_images(records, transform.image_root)
    targets = np.array(
        [schema.targets(record.attributes) for record in records], dtype=np.int64
    ).reshape(len(records), len(schema.names))
    if not records:
        return (
            [np.zeros((0, count)) for count in schema.value_counts],
            list(targets.T),
        )
    was_training = model.training
    model.eval()
    loader = DataLoader(RecordDataset(records, transform), batch_size=batch_size)
    chunks: list[list[np.ndarray]] = [[] for _ in schema.names]
    for images, _ in loader:
        for index, probabilities in enumerate(
            model.attribute_probabilities(images.to(device))
        ):
            chunks[index].append(probabilities.cpu().double().numpy())
    model.train(was_training)
    return [np.concatenate(chunk, axis=0) for chunk in chunks], list(targets.T)
