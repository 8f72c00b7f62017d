"""Metric, center and classification losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

import torch
import torch.nn.functional as F
from torch import nn

from .const import (
    DEFAULT_BETA_CENTER,
    DEFAULT_GAMMA_TRIPLET,
    DEFAULT_MARGIN,
    DEFAULT_SMOOTHING,
    MISSING_ATTRIBUTE,
)
from .exceptions import ArgumentError

if TYPE_CHECKING:
    from collections.abc import Mapping

    from .data.mixup import MixedBatch
    from .network.model import ModelOutput


@dataclass(frozen=True)
class LossWeights:
    """Weights and hyperparameters of the total loss."""

    gamma_triplet: float = DEFAULT_GAMMA_TRIPLET
    beta_center: float = DEFAULT_BETA_CENTER
    margin: float = DEFAULT_MARGIN
    smoothing: float = DEFAULT_SMOOTHING

    def __post_init__(self) -> None:
        """Check the ranges."""
        if self.margin < 0:
            raise ArgumentError(f"Margin must be non-negative, got {self.margin}")
        if not 0 <= self.smoothing < 1:
            raise ArgumentError(f"Smoothing must be in [0, 1), got {self.smoothing}")

    @classmethod
    def from_config(cls, loss: Mapping[str, Any]) -> LossWeights:
        """Build from the `loss` config section."""
        return cls(**{key: float(value) for key, value in loss.items()})


@dataclass
class LossReport:
    """The four loss components and their weighted total."""

    lsr: torch.Tensor
    ce: torch.Tensor
    triplet: torch.Tensor
    center: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> dict[str, float]:
        """Return the components as floats."""
        return {
            "lsr": float(self.lsr),
            "ce": float(self.ce),
            "triplet": float(self.triplet),
            "center": float(self.center),
            "total": float(self.total),
        }

    def is_finite(self) -> bool:
        """Return whether every component is finite."""
        return all(torch.isfinite(value).all() for value in self.as_tensors())

    def as_tensors(self) -> tuple[torch.Tensor, ...]:
        """Return the components and the total."""
        return self.lsr, self.ce, self.triplet, self.center, self.total


def pairwise_euclidean(features: torch.Tensor) -> torch.Tensor:
    """Return the (N, N) Euclidean distance matrix."""
    squared = features.pow(2).sum(dim=1, keepdim=True)
    distances = squared + squared.t() - 2 * features @ features.t()
    return distances.clamp(min=1e-12).sqrt()


def trihard_loss(
    features: torch.Tensor, pids: torch.Tensor, margin: float = DEFAULT_MARGIN
) -> torch.Tensor:
    """Hinge on hardest positive minus hardest negative, summed over anchors."""
    if torch.unique(pids).numel() < 2:
        raise ArgumentError("Triplet loss needs at least two identities in the batch")
    distances = pairwise_euclidean(F.normalize(features, dim=1))
    same = pids.unsqueeze(0) == pids.unsqueeze(1)
    hardest_positive = torch.where(same, distances, -torch.inf).max(dim=1).values
    hardest_negative = torch.where(same, torch.inf, distances).min(dim=1).values
    return F.relu(hardest_positive - hardest_negative + margin).sum()


class CenterLoss(nn.Module):
    """Half the squared distance of each feature to its class center, summed."""

    def __init__(self, num_classes: int, feature_dim: int) -> None:
        """Initialize the centers."""
        super().__init__()
        self.centers = nn.Parameter(torch.randn(num_classes, feature_dim))

    def forward(self, features: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        """Return the loss."""
        num_classes = self.centers.shape[0]
        if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
            raise ArgumentError(f"Labels outside [0, {num_classes}) have no center")
        return 0.5 * (features - self.centers[labels]).pow(2).sum()


def _check_targets(
    targets: torch.Tensor, num_classes: int, allow_missing: bool
) -> None:
    """Raise when a target is outside [0, num_classes)."""
    valid = targets[targets != MISSING_ATTRIBUTE] if allow_missing else targets
    if valid.numel() and (valid.min() < 0 or valid.max() >= num_classes):
        raise ArgumentError(f"Targets outside [0, {num_classes})")


def lsr_loss(
    logits: torch.Tensor,
    targets: torch.Tensor,
    epsilon: float = DEFAULT_SMOOTHING,
) -> torch.Tensor:
    """
    Cross-entropy against targets smoothed toward uniform.

    The smoothed distribution puts 1 - epsilon + epsilon / K on the target and
    epsilon / K elsewhere. Rows whose target is MISSING_ATTRIBUTE are skipped;
    the loss is the mean over the remaining rows.
    """
    num_classes = logits.shape[1]
    if num_classes < 2:
        raise ArgumentError("Label smoothing needs at least two classes")
    _check_targets(targets, num_classes, allow_missing=True)
    valid = targets != MISSING_ATTRIBUTE
    if not bool(valid.any()):
        return logits.sum() * 0.0
    log_probs = F.log_softmax(logits[valid], dim=1)
    smoothed = torch.full_like(log_probs, epsilon / num_classes)
    peak = 1 - epsilon + epsilon / num_classes
    smoothed.scatter_(1, targets[valid].unsqueeze(1), peak)
    return -(smoothed * log_probs).sum(dim=1).mean()


def ce_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Identity cross-entropy averaged over the batch."""
    _check_targets(targets, logits.shape[1], allow_missing=False)
    return F.cross_entropy(logits, targets)


def total_loss(
    lsr: torch.Tensor,
    ce: torch.Tensor,
    triplet: torch.Tensor,
    center: torch.Tensor,
    weights: LossWeights,
) -> LossReport:
    """Combine the components as lsr + ce + gamma * triplet + beta * center."""
    total = lsr + ce + weights.gamma_triplet * triplet + weights.beta_center * center
    return LossReport(lsr=lsr, ce=ce, triplet=triplet, center=center, total=total)


def classification_losses(
    output: ModelOutput, targets: torch.Tensor, epsilon: float
) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Return (LSR, CE) averaged per head family.

    `targets` holds the identity label in column 0 and one attribute target
    per type in the remaining columns.
    """
    lsr_terms = []
    ce_terms = []
    for head in output.heads.values():
        ce_terms.append(ce_loss(head.logits, targets[:, 0]))
        for column, log_probs in enumerate(head.attribute_log_probs, start=1):
            lsr_terms.append(lsr_loss(log_probs, targets[:, column], epsilon))
    ce = torch.stack(ce_terms).mean()
    lsr = torch.stack(lsr_terms).mean() if lsr_terms else ce.new_zeros(())
    return lsr, ce


class MultiTaskCriterion(nn.Module):
    """Total loss over every branch head, with the center state it learns."""

    def __init__(
        self, num_classes: int, feature_dim: int, weights: LossWeights
    ) -> None:
        """Initialize the center loss."""
        super().__init__()
        self.weights = weights
        self.center = CenterLoss(num_classes, feature_dim)

    def forward(
        self,
        output: ModelOutput,
        labels: torch.Tensor,
        attribute_targets: torch.Tensor,
        mixed: MixedBatch | None = None,
        metric_output: ModelOutput | None = None,
    ) -> LossReport:
        """
        Compute the report.

        With mixup, `output` comes from the mixed images and feeds only the
        classification losses; `metric_output` is the unmixed pass.
        """
        epsilon = self.weights.smoothing
        if mixed is None:
            targets = torch.cat([labels.unsqueeze(1), attribute_targets], dim=1)
            lsr, ce = classification_losses(output, targets, epsilon)
        else:
            lsr_a, ce_a = classification_losses(output, mixed.targets_a, epsilon)
            lsr_b, ce_b = classification_losses(output, mixed.targets_b, epsilon)
            lsr = mixed.lam * lsr_a + (1 - mixed.lam) * lsr_b
            ce = mixed.lam * ce_a + (1 - mixed.lam) * ce_b
        metric = (metric_output or output).bundle.normalized_metric_feature()
        triplet = trihard_loss(metric, labels, self.weights.margin)
        center = self.center(metric, labels)
        return total_loss(lsr, ce, triplet, center, self.weights)
