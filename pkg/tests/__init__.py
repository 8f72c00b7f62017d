"""Tests for the MMFL retrieval package."""

from __future__ import annotations

import json
import math
from typing import TYPE_CHECKING, Any

import numpy as np
import torch

from mmfl_net.config import resolve_config
from mmfl_net.const import Domain, Split
from mmfl_net.data.manifest import AttributeSchema, ImageRecord
from mmfl_net.network.model import build_model
from mmfl_net.retrieval.embeddings import EmbeddingStore

if TYPE_CHECKING:
    from collections.abc import Mapping, Sequence

    from mmfl_net.config import Config
    from mmfl_net.network.model import MMFLNet

# Narrow widths that keep a CPU forward pass at 64x64 in the milliseconds.
MICRO_MODEL: dict[str, Any] = {
    "stem_channels": 4,
    "stage_channels": [8, 16, 24, 32],
    "blocks_per_stage": [1, 1, 1, 1],
    "pyramid_width": 8,
    "fused_width": 16,
    "bifpn_repeats": 1,
    "gcnet_reduction": 4,
    "embed_dim": 8,
    "part_dim": 4,
    "lras_channels": 8,
    "lras_top_k": 2,
    "pid_hidden": 8,
    "attribute_hidden": 8,
}
MICRO_METRIC_DIM = 8 + 2 * 4 + 2 * 4 + 8
MICRO_EMBEDDING_DIM = 4 * 8


def make_config(
    overrides: Mapping[str, Any] | None = None,
    preset: str = "tiny",
    micro: bool = True,
) -> Config:
    """Resolve a configuration from dotted overrides, ignoring the environment."""
    items: dict[str, Any] = {"preset": preset}
    if micro:
        items |= {f"model.{key}": value for key, value in MICRO_MODEL.items()}
    items |= dict(overrides or {})
    return resolve_config(
        None, [f"{key}={json.dumps(value)}" for key, value in items.items()], env={}
    )


def make_model(
    num_classes: int = 4, config: Config | None = None, seed: int = 0
) -> MMFLNet:
    """Build a seeded network from a configuration, the micro one by default."""
    config = config or make_config()
    torch.manual_seed(seed)
    schema = AttributeSchema.from_config(config.get("data.attributes"))
    return build_model(config.section("model"), num_classes, schema.value_counts)


def make_record(
    pid: int,
    domain: Domain = Domain.CONSUMER,
    split: Split = Split.TRAIN,
    index: int = 0,
    attributes: dict[str, int] | None = None,
) -> ImageRecord:
    """Build a record whose image path follows the synthetic layout."""
    return ImageRecord(
        image_path=f"images/{pid:04d}_{domain.value}_{index}.png",
        pid=pid,
        domain=domain,
        split=split,
        attributes=attributes or {},
    )


def make_records(
    num_pids: int, per_domain: int | Sequence[int], split: Split = Split.TRAIN
) -> list[ImageRecord]:
    """Build consumer and shop records per pid; `per_domain` may vary by pid."""
    counts = [per_domain] * num_pids if isinstance(per_domain, int) else per_domain
    return [
        make_record(pid, domain, split, index)
        for pid, count in enumerate(counts)
        for domain in (Domain.CONSUMER, Domain.SHOP)
        for index in range(count)
    ]


def make_store(
    matrix: np.ndarray, pids: Sequence[int] | None = None, normalize: bool = True
) -> EmbeddingStore:
    """Wrap rows in a store, L2-normalizing them by default."""
    matrix = np.asarray(matrix, dtype=np.float32)
    if normalize:
        matrix = matrix / np.linalg.norm(matrix, axis=1, keepdims=True)
    count = matrix.shape[0]
    return EmbeddingStore(
        matrix=matrix,
        pids=list(pids) if pids is not None else list(range(count)),
        domains=[Domain.SHOP] * count,
        paths=[f"row{row}.png" for row in range(count)],
    )


def random_unit_rows(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    """Draw float32 unit rows."""
    matrix = rng.standard_normal((rows, dim)).astype(np.float32)
    return matrix / np.linalg.norm(matrix, axis=1, keepdims=True)


def brute_force_cmc_map(
    distmat: np.ndarray, query_pids: Sequence[int], gallery_pids: Sequence[int]
) -> tuple[float, list[float], int]:
    """Score a distance matrix one query at a time; returns (mAP, cmc, excluded)."""
    num_gallery = len(gallery_pids)
    hits = [0] * num_gallery
    aps = []
    excluded = 0
    for row, pid in enumerate(query_pids):
        order = sorted(range(num_gallery), key=lambda g: (float(distmat[row][g]), g))
        relevant = [
            rank for rank, g in enumerate(order, start=1) if gallery_pids[g] == pid
        ]
        if not relevant:
            excluded += 1
            continue
        precisions = [found / rank for found, rank in enumerate(relevant, start=1)]
        aps.append(sum(precisions) / len(precisions))
        for k in range(relevant[0], num_gallery + 1):
            hits[k - 1] += 1
    if not aps:
        return 0.0, [0.0] * num_gallery, excluded
    return sum(aps) / len(aps), [hit / len(aps) for hit in hits], excluded


def brute_force_trihard(
    features: Sequence[Sequence[float]], pids: Sequence[int], margin: float
) -> float:
    """Batch-hard triplet loss with explicit loops over anchors and pairs."""
    unit = []
    for row in features:
        norm = math.sqrt(sum(value * value for value in row))
        unit.append([value / norm for value in row])
    total = 0.0
    for anchor, anchor_pid in enumerate(pids):
        positives = []
        negatives = []
        for other, other_pid in enumerate(pids):
            distance = math.sqrt(
                max(sum((a - b) ** 2 for a, b in zip(unit[anchor], unit[other])), 1e-12)
            )
            (positives if other_pid == anchor_pid else negatives).append(distance)
        total += max(max(positives) - min(negatives) + margin, 0.0)
    return total


def brute_force_center(
    features: Sequence[Sequence[float]],
    centers: Sequence[Sequence[float]],
    labels: Sequence[int],
) -> float:
    """Half the summed squared distance to each sample's center."""
    return 0.5 * sum(
        sum((value - center) ** 2 for value, center in zip(row, centers[label]))
        for row, label in zip(features, labels)
    )


def _log_softmax(row: Sequence[float]) -> list[float]:
    """Stable log-softmax of one row."""
    peak = max(row)
    log_sum = peak + math.log(sum(math.exp(value - peak) for value in row))
    return [value - log_sum for value in row]


def brute_force_lsr(
    logits: Sequence[Sequence[float]], targets: Sequence[int], epsilon: float
) -> float:
    """Smoothed cross-entropy with the target distribution written out per class."""
    losses = []
    for row, target in zip(logits, targets):
        if target < 0:
            continue
        classes = len(row)
        log_probs = _log_softmax(row)
        smoothed = [
            (1 - epsilon) * (1.0 if index == target else 0.0) + epsilon / classes
            for index in range(classes)
        ]
        losses.append(-sum(q * lp for q, lp in zip(smoothed, log_probs)))
    return sum(losses) / len(losses) if losses else 0.0


def mixed_form_lsr(
    logits: Sequence[Sequence[float]], targets: Sequence[int], epsilon: float
) -> float:
    """Smoothed cross-entropy as (1 - eps) * CE + eps * mean uniform CE."""
    losses = []
    for row, target in zip(logits, targets):
        log_probs = _log_softmax(row)
        uniform = -sum(log_probs) / len(row)
        losses.append((1 - epsilon) * -log_probs[target] + epsilon * uniform)
    return sum(losses) / len(losses)


def brute_force_ce(logits: Sequence[Sequence[float]], targets: Sequence[int]) -> float:
    """Mean negative log-likelihood of the targets."""
    pairs = zip(logits, targets, strict=True)
    return -sum(_log_softmax(row)[target] for row, target in pairs) / len(targets)


def top_k_oracle(scores: Sequence[float], k: int) -> list[int]:
    """Indices of the k largest scores, lowest index first among ties."""
    return sorted(range(len(scores)), key=lambda index: (-scores[index], index))[:k]


def reference_rerank(
    q_g: np.ndarray,
    q_q: np.ndarray,
    g_g: np.ndarray,
    k1: int,
    k2: int,
    lambda_value: float,
) -> np.ndarray:
    """k-reciprocal re-ranking written with Python sets and loops."""
    num_query, num_gallery = q_g.shape
    total = num_query + num_gallery

    def original(i: int, j: int) -> float:
        if i < num_query and j < num_query:
            value = q_q[i][j]
        elif i < num_query:
            value = q_g[i][j - num_query]
        elif j < num_query:
            value = q_g[j][i - num_query]
        else:
            value = g_g[i - num_query][j - num_query]
        return float(value) ** 2

    dist = [[original(i, j) for j in range(total)] for i in range(total)]
    dist = [[value / max(row) for value in row] for row in dist]
    ranking = [
        sorted(range(total), key=lambda j, i=i: (dist[i][j], j)) for i in range(total)
    ]

    def reciprocal(i: int, k: int) -> list[int]:
        return [j for j in ranking[i][: k + 1] if i in ranking[j][: k + 1]]

    weights = [[0.0] * total for _ in range(total)]
    for i in range(total):
        base = reciprocal(i, k1)
        expanded = set(base)
        for candidate in base:
            candidate_set = reciprocal(candidate, round(k1 / 2))
            if len(set(candidate_set) & set(base)) > 2 / 3 * len(candidate_set):
                expanded |= set(candidate_set)
        norm = sum(math.exp(-dist[i][j]) for j in expanded)
        for j in expanded:
            weights[i][j] = math.exp(-dist[i][j]) / norm

    if k2 != 1:
        weights = [
            [sum(weights[n][j] for n in ranking[i][:k2]) / k2 for j in range(total)]
            for i in range(total)
        ]

    final = np.zeros((num_query, num_gallery))
    for i in range(num_query):
        for g in range(num_gallery):
            j = num_query + g
            low = sum(min(a, b) for a, b in zip(weights[i], weights[j]))
            high = sum(max(a, b) for a, b in zip(weights[i], weights[j]))
            jaccard = 1 - low / high
            final[i][g] = lambda_value * dist[i][j] + (1 - lambda_value) * jaccard
    return final


def attribute_tally(
    predictions: Sequence[int], targets: Sequence[int], values: int
) -> tuple[list[list[int]], float, float]:
    """Count the confusion matrix, accuracy and macro recall over occurring classes."""
    confusion = [[0] * values for _ in range(values)]
    for predicted, actual in zip(predictions, targets):
        confusion[actual][predicted] += 1
    correct = sum(confusion[index][index] for index in range(values))
    present = [
        index
        for index in range(values)
        if sum(confusion[index]) or sum(row[index] for row in confusion)
    ]
    recalls = [
        confusion[index][index] / sum(confusion[index])
        if sum(confusion[index])
        else 0.0
        for index in present
    ]
    return confusion, correct / len(targets), sum(recalls) / len(recalls)
