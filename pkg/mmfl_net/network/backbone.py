"""Residual bottleneck backbone with an optional instance-batch norm mix."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

import torch
from torch import nn

from ..exceptions import ConfigurationError, ShapeError
from .const import INPUT_MULTIPLE, STAGE_STRIDES, NormMode

if TYPE_CHECKING:
    from collections.abc import Mapping, Sequence


@dataclass(frozen=True)
class BackboneConfig:
    """Stage widths, depths and normalization layout."""

    stage_channels: tuple[int, int, int, int] = (256, 512, 1024, 2048)
    blocks_per_stage: tuple[int, int, int, int] = (3, 4, 6, 3)
    stem_channels: int = 64
    norm_mode: NormMode = NormMode.INSTANCE_BATCH_MIX

    def __post_init__(self) -> None:
        """Check stage widths increase and every stage has a block."""
        channels = self.stage_channels
        if any(b <= a for a, b in zip(channels, channels[1:], strict=False)):
            raise ConfigurationError(f"Stage channels must increase, got {channels}")
        if min(self.blocks_per_stage) < 1:
            raise ConfigurationError("Every stage needs at least one block")

    @property
    def stage_strides(self) -> tuple[int, ...]:
        """Return the fixed output stride of each stage."""
        return STAGE_STRIDES

    @classmethod
    def from_config(cls, model: Mapping[str, Any]) -> BackboneConfig:
        """Build from the `model` config section."""
        return cls(
            stage_channels=tuple(model["stage_channels"]),  # type: ignore[arg-type]
            blocks_per_stage=tuple(model["blocks_per_stage"]),  # type: ignore[arg-type]
            stem_channels=model["stem_channels"],
            norm_mode=NormMode(model["norm_mode"]),
        )


@dataclass
class StagePyramid:
    """Stage outputs at strides 4, 8, 16 and 32."""

    c2: torch.Tensor
    c3: torch.Tensor
    c4: torch.Tensor
    c5: torch.Tensor
    input_size: tuple[int, int]

    def stages(self) -> tuple[torch.Tensor, ...]:
        """Return the maps from finest to coarsest."""
        return self.c2, self.c3, self.c4, self.c5


class InstanceBatchNorm(nn.Module):
    """Instance norm on the first half of the channels, batch norm on the rest."""

    def __init__(self, channels: int) -> None:
        """Split the channels between the two norms."""
        super().__init__()
        self.half = max(1, channels // 2)
        self.instance = nn.InstanceNorm2d(self.half, affine=True)
        self.batch = (
            nn.BatchNorm2d(channels - self.half) if channels > self.half else None
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Normalize both channel groups."""
        if self.batch is None:
            return self.instance(x)  # type: ignore[no-any-return]
        first, second = torch.split(x, [self.half, x.shape[1] - self.half], dim=1)
        return torch.cat([self.instance(first), self.batch(second)], dim=1)


class Bottleneck(nn.Module):
    """1x1 reduce, 3x3, 1x1 expand, with a projected shortcut when shapes change."""

    def __init__(
        self, in_channels: int, out_channels: int, stride: int, ibn: bool = False
    ) -> None:
        """Initialize the block."""
        super().__init__()
        mid = max(1, out_channels // 4)
        self.conv1 = nn.Conv2d(in_channels, mid, 1, bias=False)
        self.bn1: nn.Module = InstanceBatchNorm(mid) if ibn else nn.BatchNorm2d(mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(mid)
        self.conv3 = nn.Conv2d(mid, out_channels, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU(inplace=True)
        self.downsample: nn.Module | None = None
        if stride != 1 or in_channels != out_channels:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Apply the residual block."""
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)  # type: ignore[no-any-return]


def init_weights(module: nn.Module) -> None:
    """Fan-in normal init for convolutions, unit/zero init for norms."""
    for layer in module.modules():
        if isinstance(layer, (nn.Conv1d, nn.Conv2d)):
            nn.init.kaiming_normal_(layer.weight, mode="fan_in", nonlinearity="relu")
            if layer.bias is not None:
                nn.init.zeros_(layer.bias)
        elif isinstance(layer, (nn.BatchNorm1d, nn.BatchNorm2d, nn.InstanceNorm2d)):
            if layer.weight is not None:
                nn.init.ones_(layer.weight)
                nn.init.zeros_(layer.bias)


class Backbone(nn.Module):
    """Stem plus four residual stages."""

    def __init__(self, config: BackboneConfig) -> None:
        """Build the stages."""
        super().__init__()
        self.config = config
        self.stem = nn.Sequential(
            nn.Conv2d(3, config.stem_channels, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(config.stem_channels),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        ibn = config.norm_mode is NormMode.INSTANCE_BATCH_MIX
        stages: list[nn.Module] = []
        in_channels = config.stem_channels
        for index, (channels, blocks) in enumerate(
            zip(config.stage_channels, config.blocks_per_stage, strict=True)
        ):
            stride = 1 if index == 0 else 2
            layers = [Bottleneck(in_channels, channels, stride, ibn=ibn and index < 3)]
            layers.extend(Bottleneck(channels, channels, 1) for _ in range(blocks - 1))
            stages.append(nn.Sequential(*layers))
            in_channels = channels
        self.stages = nn.ModuleList(stages)
        init_weights(self)

    @property
    def out_channels(self) -> Sequence[int]:
        """Return the channel count of each stage."""
        return self.config.stage_channels

    def forward(self, images: torch.Tensor) -> StagePyramid:
        """Extract the four stage maps."""
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError(f"Expected (B, 3, H, W) images, got {tuple(images.shape)}")
        height, width = images.shape[-2:]
        if height % INPUT_MULTIPLE or width % INPUT_MULTIPLE:
            raise ShapeError(
                f"Input {height}x{width} is not divisible by {INPUT_MULTIPLE}"
            )
        x = self.stem(images)
        outputs = []
        for stage in self.stages:
            x = stage(x)
            outputs.append(x)
        c2, c3, c4, c5 = outputs
        return StagePyramid(c2=c2, c3=c3, c4=c4, c5=c5, input_size=(height, width))
