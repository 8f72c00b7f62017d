"""Global, part and local-detail feature branches."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import torch
import torch.nn.functional as F
from torch import nn

from ..exceptions import ArgumentError, ShapeError
from .const import BRANCH_ORDER, ECA_BETA, ECA_GAMMA, NUM_PARTS, Branch, Orientation

if TYPE_CHECKING:
    from collections.abc import Iterable


@dataclass
class BranchOutput:
    """Descriptor fed to the recognition heads and the reduced embedding."""

    descriptor: torch.Tensor
    embedding: torch.Tensor
    parts: list[torch.Tensor] = field(default_factory=list)
    selected: torch.Tensor | None = None


@dataclass
class EmbeddingBundle:
    """Per-branch outputs of one batch."""

    outputs: dict[Branch, BranchOutput]

    @property
    def branches(self) -> list[Branch]:
        """Return the present branches in concatenation order."""
        return [branch for branch in BRANCH_ORDER if branch in self.outputs]

    @property
    def metric_feature(self) -> torch.Tensor:
        """Concatenate the branch embeddings in branch order."""
        return torch.cat([self.outputs[b].embedding for b in self.branches], dim=1)

    def normalized_metric_feature(self) -> torch.Tensor:
        """Return the L2-normalized metric feature."""
        return F.normalize(self.metric_feature, dim=1)


def _reduction(in_channels: int, out_channels: int) -> nn.Sequential:
    """1x1 conv, batch norm and ReLU on a (B, C, 1, 1) vector."""
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 1, bias=False),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
    )


def pool_sum(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Adaptive average pool plus adaptive max pool."""
    return F.adaptive_avg_pool2d(x, size) + F.adaptive_max_pool2d(x, size)


class GlobalBranch(nn.Module):
    """Pooled global descriptor and its reduced embedding."""

    def __init__(self, in_channels: int, embed_dim: int) -> None:
        """Initialize the reduction."""
        super().__init__()
        self.reduce = _reduction(in_channels, embed_dim)

    def forward(self, x_g: torch.Tensor) -> BranchOutput:
        """Return z (GAP + GMP) and f."""
        z = pool_sum(x_g, (1, 1))
        return BranchOutput(
            descriptor=z.flatten(1), embedding=self.reduce(z).flatten(1)
        )


class PartBranch(nn.Module):
    """Two stripes along one axis, each reduced separately."""

    def __init__(
        self, in_channels: int, part_dim: int, orientation: Orientation
    ) -> None:
        """Initialize one reduction per part."""
        super().__init__()
        self.orientation = orientation
        self.reductions = nn.ModuleList(
            _reduction(in_channels, part_dim) for _ in range(NUM_PARTS)
        )

    def forward(self, x_part: torch.Tensor) -> BranchOutput:
        """Return the flattened parts, the part embeddings and their concatenation."""
        horizontal = self.orientation is Orientation.HORIZONTAL
        axis = -2 if horizontal else -1
        if x_part.shape[axis] < NUM_PARTS:
            raise ShapeError(
                f"{self.orientation} partition needs {NUM_PARTS} cells along its axis, "
                f"got {tuple(x_part.shape)}"
            )
        size = (NUM_PARTS, 1) if horizontal else (1, NUM_PARTS)
        z = pool_sum(x_part, size)
        parts = [
            reduce(z.narrow(axis, index, 1)).flatten(1)
            for index, reduce in enumerate(self.reductions)
        ]
        return BranchOutput(
            descriptor=z.flatten(1), embedding=torch.cat(parts, dim=1), parts=parts
        )


def eca_kernel_size(channels: int, gamma: int = ECA_GAMMA, beta: int = ECA_BETA) -> int:
    """Adaptive 1D kernel size, rounded up to odd."""
    size = int(abs((math.log2(channels) + beta) / gamma))
    return size if size % 2 else size + 1


class EfficientChannelAttention(nn.Module):
    """Sigmoid channel gates from a 1D convolution over pooled channels."""

    def __init__(self, channels: int) -> None:
        """Initialize the 1D convolution."""
        super().__init__()
        self.kernel_size = eca_kernel_size(channels)
        self.conv = nn.Conv1d(
            1, 1, self.kernel_size, padding=self.kernel_size // 2, bias=False
        )

    def mask(self, x: torch.Tensor) -> torch.Tensor:
        """Return the (B, C, 1, 1) gates."""
        pooled = F.adaptive_avg_pool2d(x, 1).flatten(1).unsqueeze(1)
        return torch.sigmoid(self.conv(pooled)).transpose(1, 2).unsqueeze(-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Reweight the channels."""
        return x * self.mask(x)


class ResidualUnit(nn.Module):
    """Two 3x3 conv/BN layers with an identity shortcut."""

    def __init__(self, channels: int) -> None:
        """Initialize the unit."""
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Apply the unit."""
        return F.relu(x + self.body(x))


def select_top_k(scores: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the k largest scores per row, lowest index first among ties."""
    if not 1 <= k <= scores.shape[-1]:
        raise ArgumentError(f"Cannot select {k} of {scores.shape[-1]} channels")
    return torch.sort(scores, dim=-1, descending=True, stable=True).indices[..., :k]


class LocalAttentionSelection(nn.Module):
    """
    Mask-modulated trunk features with top-K channel selection.

    The fused map is (1 + mask) * trunk. Channels are scored by their summed
    response; each of the K best channels marks the positions where it is
    active, and the fused map is averaged over those positions. The K pooled
    vectors form the descriptor, which is reduced to the embedding.
    """

    def __init__(
        self, in_channels: int, channels: int, top_k: int, embed_dim: int
    ) -> None:
        """Initialize the streams and the reduction."""
        super().__init__()
        if not 1 <= top_k <= channels:
            raise ArgumentError(f"Cannot select {top_k} of {channels} channels")
        self.top_k = top_k
        self.channels = channels
        self.reduce_in = _reduction(in_channels, channels)
        self.trunk = ResidualUnit(channels)
        self.mask = nn.Sequential(
            ResidualUnit(channels), nn.Conv2d(channels, channels, 1), nn.Sigmoid()
        )
        self.reduce_out = _reduction(top_k * channels, embed_dim)

    @staticmethod
    def fuse(trunk: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Return (1 + mask) * trunk."""
        return (1 + mask) * trunk

    @staticmethod
    def pool_selected(fused: torch.Tensor, selected: torch.Tensor) -> torch.Tensor:
        """Average the fused map over the positions each selected channel activates."""
        batch, channels = fused.shape[:2]
        flat = fused.flatten(2)
        index = selected.unsqueeze(-1).expand(-1, -1, flat.shape[-1])
        regions = (torch.gather(flat, 1, index) > 0).to(flat.dtype)
        counts = regions.sum(dim=-1, keepdim=True).clamp(min=1)
        pooled = torch.bmm(regions / counts, flat.transpose(1, 2))
        return pooled.reshape(batch, selected.shape[1] * channels)

    def forward(self, x: torch.Tensor) -> BranchOutput:
        """Select the top-K channels and embed them."""
        features = self.reduce_in(x)
        fused = self.fuse(self.trunk(features), self.mask(features))
        selected = select_top_k(fused.sum(dim=(2, 3)), self.top_k)
        descriptor = self.pool_selected(fused, selected)
        embedding = self.reduce_out(descriptor[:, :, None, None]).flatten(1)
        return BranchOutput(
            descriptor=descriptor, embedding=embedding, selected=selected
        )


class LocalDetailBranch(nn.Module):
    """Channel attention followed by local attention selection."""

    def __init__(
        self, in_channels: int, channels: int, top_k: int, embed_dim: int
    ) -> None:
        """Initialize both stages."""
        super().__init__()
        self.eca = EfficientChannelAttention(in_channels)
        self.lras = LocalAttentionSelection(in_channels, channels, top_k, embed_dim)

    def forward(self, x_part: torch.Tensor) -> BranchOutput:
        """Run the branch."""
        return self.lras(self.eca(x_part))  # type: ignore[no-any-return]


def descriptor_widths(
    fused_width: int, lras_channels: int, top_k: int
) -> dict[Branch, int]:
    """Return the descriptor width of each branch."""
    return {
        Branch.GLOBAL: fused_width,
        Branch.HORIZONTAL: NUM_PARTS * fused_width,
        Branch.VERTICAL: NUM_PARTS * fused_width,
        Branch.LOCAL: top_k * lras_channels,
    }


class FeatureBranches(nn.Module):
    """The enabled branches over the fused maps."""

    def __init__(
        self,
        fused_width: int,
        embed_dim: int,
        part_dim: int,
        lras_channels: int,
        top_k: int,
        branches: Iterable[Branch] = BRANCH_ORDER,
    ) -> None:
        """Build the enabled branches."""
        super().__init__()
        enabled = set(branches)
        self.branches = [branch for branch in BRANCH_ORDER if branch in enabled]
        modules: dict[str, nn.Module] = {}
        for branch in self.branches:
            if branch is Branch.GLOBAL:
                modules[branch] = GlobalBranch(fused_width, embed_dim)
            elif branch is Branch.HORIZONTAL:
                modules[branch] = PartBranch(
                    fused_width, part_dim, Orientation.HORIZONTAL
                )
            elif branch is Branch.VERTICAL:
                modules[branch] = PartBranch(
                    fused_width, part_dim, Orientation.VERTICAL
                )
            else:
                modules[branch] = LocalDetailBranch(
                    fused_width, lras_channels, top_k, embed_dim
                )
        self.modules_by_branch = nn.ModuleDict(modules)
        self._embedding_widths = {
            Branch.GLOBAL: embed_dim,
            Branch.HORIZONTAL: NUM_PARTS * part_dim,
            Branch.VERTICAL: NUM_PARTS * part_dim,
            Branch.LOCAL: embed_dim,
        }

    @property
    def metric_dim(self) -> int:
        """Return the width of the concatenated metric feature."""
        return sum(self._embedding_widths[branch] for branch in self.branches)

    def forward(self, x_g: torch.Tensor, x_part: torch.Tensor) -> EmbeddingBundle:
        """Run every enabled branch."""
        outputs: dict[Branch, BranchOutput] = {}
        for branch in self.branches:
            source = x_g if branch is Branch.GLOBAL else x_part
            outputs[branch] = self.modules_by_branch[branch](source)
        return EmbeddingBundle(outputs)
