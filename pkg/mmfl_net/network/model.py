"""The assembled retrieval network."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

import torch
from torch import nn

from ..exceptions import ConfigurationError
from .backbone import Backbone, BackboneConfig
from .branches import EmbeddingBundle, FeatureBranches, descriptor_widths
from .const import Branch
from .jarn import HeadOutput, JointHead, inference_embed
from .sffp import FeatureFusion

if TYPE_CHECKING:
    from collections.abc import Mapping, Sequence

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    """Widths and switches of the whole network."""

    backbone: BackboneConfig
    pyramid_width: int
    fused_width: int
    bifpn_repeats: int
    gcnet_reduction: int
    embed_dim: int
    part_dim: int
    lras_channels: int
    lras_top_k: int
    pid_hidden: int
    attribute_hidden: int
    branches: tuple[Branch, ...]

    @classmethod
    def from_config(cls, model: Mapping[str, Any]) -> ModelConfig:
        """Build from the `model` config section."""
        return cls(
            backbone=BackboneConfig.from_config(model),
            pyramid_width=model["pyramid_width"],
            fused_width=model["fused_width"],
            bifpn_repeats=model["bifpn_repeats"],
            gcnet_reduction=model["gcnet_reduction"],
            embed_dim=model["embed_dim"],
            part_dim=model["part_dim"],
            lras_channels=model["lras_channels"],
            lras_top_k=model["lras_top_k"],
            pid_hidden=model["pid_hidden"],
            attribute_hidden=model["attribute_hidden"],
            branches=tuple(Branch(name) for name in model["branches"]),
        )


@dataclass
class ModelOutput:
    """Branch outputs and head outputs of one forward pass."""

    bundle: EmbeddingBundle
    heads: dict[Branch, HeadOutput]

    def embedding(self, normalize: bool = True) -> torch.Tensor:
        """Return the inference embedding."""
        return inference_embed(
            [self.heads[branch].bn_hidden for branch in self.bundle.branches], normalize
        )


class MMFLNet(nn.Module):
    """Backbone, feature fusion, branches and per-branch recognition heads."""

    def __init__(
        self, config: ModelConfig, num_classes: int, value_counts: Sequence[int]
    ) -> None:
        """Build the network."""
        super().__init__()
        if num_classes < 2:
            raise ConfigurationError(
                f"Need at least 2 identity classes, got {num_classes}"
            )
        self.config = config
        self.num_classes = num_classes
        self.backbone = Backbone(config.backbone)
        self.fusion = FeatureFusion(
            self.backbone.out_channels,
            config.pyramid_width,
            config.fused_width,
            config.bifpn_repeats,
            config.gcnet_reduction,
        )
        self.branches = FeatureBranches(
            config.fused_width,
            config.embed_dim,
            config.part_dim,
            config.lras_channels,
            config.lras_top_k,
            config.branches,
        )
        widths = descriptor_widths(
            config.fused_width, config.lras_channels, config.lras_top_k
        )
        self.heads = nn.ModuleDict(
            {
                branch: JointHead(
                    widths[branch],
                    config.pid_hidden,
                    config.attribute_hidden,
                    value_counts,
                    num_classes,
                )
                for branch in self.branches.branches
            }
        )

    @property
    def embedding_dim(self) -> int:
        """Return the inference embedding width."""
        return len(self.branches.branches) * self.config.pid_hidden

    @property
    def metric_dim(self) -> int:
        """Return the width of the metric feature the triplet and center losses see."""
        return self.branches.metric_dim

    def forward(self, images: torch.Tensor) -> ModelOutput:
        """Run the full network."""
        fused = self.fusion(self.backbone(images))
        bundle = self.branches(fused.x_g, fused.x_part)
        heads = {
            branch: self.heads[branch](bundle.outputs[branch].descriptor)
            for branch in bundle.branches
        }
        return ModelOutput(bundle=bundle, heads=heads)

    @torch.no_grad()
    def embed(
        self, images: torch.Tensor, branch: Branch | None = None, normalize: bool = True
    ) -> torch.Tensor:
        """Return the inference embedding, or one branch's hidden feature."""
        output = self(images)
        if branch is None:
            return output.embedding(normalize)
        if branch not in output.heads:
            raise ConfigurationError(f"Branch {branch} is not enabled")
        return inference_embed([output.heads[branch].bn_hidden], normalize)

    @torch.no_grad()
    def attribute_probabilities(self, images: torch.Tensor) -> list[torch.Tensor]:
        """Average each attribute type's probabilities over the enabled branch heads."""
        output = self(images)
        heads = [output.heads[branch] for branch in output.bundle.branches]
        return [
            torch.stack(
                [head.attribute_log_probs[index].exp() for head in heads]
            ).mean(dim=0)
            for index in range(len(heads[0].attribute_log_probs))
        ]


def build_model(
    model: Mapping[str, Any], num_classes: int, value_counts: Sequence[int]
) -> MMFLNet:
    """Build the network from the `model` config section."""
    network = MMFLNet(ModelConfig.from_config(model), num_classes, value_counts)
    _LOGGER.debug(
        "Built network with %d parameters, %d-d embedding",
        sum(p.numel() for p in network.parameters()),
        network.embedding_dim,
    )
    return network
