"""Per-branch attribute and identity recognition heads."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import torch
import torch.nn.functional as F
from torch import nn

from ..exceptions import ShapeError

if TYPE_CHECKING:
    from collections.abc import Sequence


@dataclass
class HeadOutput:
    """Attribute log-probabilities, normalized hidden identity features and logits."""

    attribute_log_probs: list[torch.Tensor]
    bn_hidden: torch.Tensor
    logits: torch.Tensor


def _check_width(descriptor: torch.Tensor, width: int) -> None:
    """Raise when the descriptor width does not match the head."""
    if descriptor.dim() != 2 or descriptor.shape[1] != width:
        raise ShapeError(
            f"Head expects (B, {width}) descriptors, got {tuple(descriptor.shape)}"
        )


class AttributeHead(nn.Module):
    """One two-layer classifier per attribute type."""

    def __init__(
        self, in_features: int, hidden: int, value_counts: Sequence[int]
    ) -> None:
        """Initialize the classifiers."""
        super().__init__()
        self.in_features = in_features
        self.classifiers = nn.ModuleList(
            nn.Sequential(
                nn.Linear(in_features, hidden),
                nn.ReLU(inplace=True),
                nn.Linear(hidden, count),
            )
            for count in value_counts
        )

    def forward(self, descriptor: torch.Tensor) -> list[torch.Tensor]:
        """Return one log-probability vector per attribute type."""
        _check_width(descriptor, self.in_features)
        return [
            F.log_softmax(classifier(descriptor), dim=1)
            for classifier in self.classifiers
        ]


class IdentityHead(nn.Module):
    """FC to the hidden width, batch norm, then a bias-free classifier."""

    def __init__(self, in_features: int, hidden: int, num_classes: int) -> None:
        """Initialize the layers."""
        super().__init__()
        self.in_features = in_features
        self.fc = nn.Linear(in_features, hidden)
        self.bn = nn.BatchNorm1d(hidden)
        self.classifier = nn.Linear(hidden, num_classes, bias=False)
        nn.init.kaiming_normal_(self.fc.weight, mode="fan_out")
        nn.init.zeros_(self.fc.bias)
        nn.init.normal_(self.classifier.weight, std=0.001)

    def forward(self, descriptor: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (bn_hidden, logits)."""
        _check_width(descriptor, self.in_features)
        bn_hidden = self.bn(self.fc(descriptor))
        return bn_hidden, self.classifier(bn_hidden)


class JointHead(nn.Module):
    """Attribute and identity heads over one branch descriptor."""

    def __init__(
        self,
        in_features: int,
        pid_hidden: int,
        attribute_hidden: int,
        value_counts: Sequence[int],
        num_classes: int,
    ) -> None:
        """Initialize both heads."""
        super().__init__()
        self.attributes = AttributeHead(in_features, attribute_hidden, value_counts)
        self.identity = IdentityHead(in_features, pid_hidden, num_classes)

    def forward(self, descriptor: torch.Tensor) -> HeadOutput:
        """Run both heads."""
        bn_hidden, logits = self.identity(descriptor)
        return HeadOutput(
            attribute_log_probs=self.attributes(descriptor),
            bn_hidden=bn_hidden,
            logits=logits,
        )


def inference_embed(
    bn_hidden: Sequence[torch.Tensor], normalize: bool = True
) -> torch.Tensor:
    """Concatenate the branch hidden features, L2-normalized by default."""
    embedding = torch.cat(list(bn_hidden), dim=1)
    return F.normalize(embedding, dim=1) if normalize else embedding
