"""Semantic-spatial feature fusion over the backbone stages."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, cast

import torch
import torch.nn.functional as F
from torch import nn

from ..exceptions import ConfigurationError, ShapeError
from .backbone import init_weights
from .const import DILATION_RATES, FUSION_EPSILON

if TYPE_CHECKING:
    from collections.abc import Sequence

    from .backbone import StagePyramid


@dataclass
class PyramidLevels:
    """Equal-width maps at strides 8, 16 and 32."""

    p3: torch.Tensor
    p4: torch.Tensor
    p5: torch.Tensor


@dataclass
class FusedFeatureMaps:
    """Coarse map for the global branch and fine map shared by the part branches."""

    x_g: torch.Tensor
    x_part: torch.Tensor


def upsample(x: torch.Tensor) -> torch.Tensor:
    """Nearest-neighbor 2x upsampling."""
    return F.interpolate(x, scale_factor=2.0, mode="nearest")


def downsample(x: torch.Tensor) -> torch.Tensor:
    """Stride-2 max pooling."""
    return F.max_pool2d(x, kernel_size=2, stride=2)


class LateralReduce(nn.Module):
    """1x1 convolutions bringing C3, C4 and C5 to the pyramid width."""

    def __init__(self, stage_channels: Sequence[int], width: int) -> None:
        """Initialize one projection per level."""
        super().__init__()
        self.p3 = nn.Conv2d(stage_channels[1], width, 1)
        self.p4 = nn.Conv2d(stage_channels[2], width, 1)
        self.p5 = nn.Conv2d(stage_channels[3], width, 1)

    def forward(self, pyramid: StagePyramid) -> PyramidLevels:
        """Project the three coarsest stages."""
        return PyramidLevels(
            p3=self.p3(pyramid.c3), p4=self.p4(pyramid.c4), p5=self.p5(pyramid.c5)
        )


class FusionWeights(nn.Module):
    """Learnable non-negative edge weights of one fusion node."""

    def __init__(self, inputs: int, epsilon: float = FUSION_EPSILON) -> None:
        """Initialize all edges with weight one."""
        super().__init__()
        self.raw = nn.Parameter(torch.ones(inputs))
        self.epsilon = epsilon

    def normalized(self) -> torch.Tensor:
        """Return relu(raw) / (sum(relu(raw)) + epsilon)."""
        weights = F.relu(self.raw)
        return weights / (weights.sum() + self.epsilon)


class SeparableConv(nn.Module):
    """Depthwise 3x3 followed by pointwise 1x1 and batch norm."""

    def __init__(self, channels: int) -> None:
        """Initialize the convolution."""
        super().__init__()
        self.depthwise = nn.Conv2d(
            channels, channels, 3, padding=1, groups=channels, bias=False
        )
        self.pointwise = nn.Conv2d(channels, channels, 1, bias=False)
        self.bn = nn.BatchNorm2d(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Apply the convolution."""
        return self.bn(self.pointwise(self.depthwise(x)))  # type: ignore[no-any-return]


class FusionNode(nn.Module):
    """Conv(swish(normalized weighted sum of the inputs))."""

    def __init__(
        self, inputs: int, channels: int, epsilon: float = FUSION_EPSILON
    ) -> None:
        """Initialize the node."""
        super().__init__()
        self.weights = FusionWeights(inputs, epsilon)
        self.conv = SeparableConv(channels)

    def weighted_sum(self, inputs: Sequence[torch.Tensor]) -> torch.Tensor:
        """Return the normalized weighted sum of the inputs."""
        weights = self.weights.normalized()
        return sum(  # type: ignore[return-value]
            (weights[i] * x for i, x in enumerate(inputs)), torch.zeros_like(inputs[0])
        )

    def forward(self, inputs: Sequence[torch.Tensor]) -> torch.Tensor:
        """Fuse the inputs."""
        fused: torch.Tensor = self.conv(F.silu(self.weighted_sum(inputs)))
        return fused


class BiFPNLayer(nn.Module):
    """One top-down then bottom-up pass over three levels."""

    def __init__(self, channels: int, epsilon: float = FUSION_EPSILON) -> None:
        """Initialize the four fusion nodes."""
        super().__init__()
        self.p4_td = FusionNode(2, channels, epsilon)
        self.p3_out = FusionNode(2, channels, epsilon)
        self.p4_out = FusionNode(3, channels, epsilon)
        self.p5_out = FusionNode(2, channels, epsilon)

    def nodes(self) -> list[FusionNode]:
        """Return the fusion nodes."""
        return [self.p4_td, self.p3_out, self.p4_out, self.p5_out]

    def forward(self, levels: PyramidLevels) -> PyramidLevels:
        """Fuse top-down, then bottom-up."""
        p4_td = self.p4_td([levels.p4, upsample(levels.p5)])
        p3_out = self.p3_out([levels.p3, upsample(p4_td)])
        p4_out = self.p4_out([levels.p4, p4_td, downsample(p3_out)])
        p5_out = self.p5_out([levels.p5, downsample(p4_out)])
        return PyramidLevels(p3=p3_out, p4=p4_out, p5=p5_out)


class BiFPN(nn.Module):
    """Repeated bidirectional fusion layers with independent weights."""

    def __init__(
        self, channels: int, repeats: int, epsilon: float = FUSION_EPSILON
    ) -> None:
        """Initialize the layers."""
        super().__init__()
        if repeats < 1:
            raise ConfigurationError(f"BiFPN repeats must be at least 1, got {repeats}")
        self.layers = nn.ModuleList(
            BiFPNLayer(channels, epsilon) for _ in range(repeats)
        )

    def nodes(self) -> list[FusionNode]:
        """Return every fusion node."""
        nodes: list[FusionNode] = []
        for layer in self.layers:
            nodes.extend(cast("BiFPNLayer", layer).nodes())
        return nodes

    def forward(self, levels: PyramidLevels) -> PyramidLevels:
        """Apply each layer in turn."""
        for layer in self.layers:
            levels = layer(levels)
        return levels


class ResolutionFusion(nn.Module):
    """x_l + x_l * avgpool(x_lm1 + x_lm1 * conv4x4(x_lm2))."""

    def __init__(self, channels: int) -> None:
        """Initialize the strided 4x4 convolution."""
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 4, stride=2, padding=1, bias=False)

    def forward(
        self, x_l: torch.Tensor, x_lm1: torch.Tensor, x_lm2: torch.Tensor
    ) -> torch.Tensor:
        """Fuse three consecutive scales into scale l."""
        height, width = x_l.shape[-2:]
        if (
            tuple(x_lm1.shape[-2:]) != (2 * height, 2 * width)
            or tuple(x_lm2.shape[-2:]) != (4 * height, 4 * width)
            or not x_l.shape[:2] == x_lm1.shape[:2] == x_lm2.shape[:2]
        ):
            raise ShapeError(
                "Resolution fusion needs equal channels and 2x scale steps, got "
                f"{tuple(x_l.shape)}, {tuple(x_lm1.shape)}, {tuple(x_lm2.shape)}"
            )
        inner = x_lm1 + x_lm1 * self.conv(x_lm2)
        return x_l + x_l * F.avg_pool2d(inner, 2)


class DenseASPP(nn.Module):
    """Densely connected dilated 3x3 convolutions at rates 3, 5 and 7."""

    def __init__(self, channels: int, rates: Sequence[int] = DILATION_RATES) -> None:
        """Initialize the dilated branches and the output projection."""
        super().__init__()
        growth = max(1, channels // 2)
        self.branches = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(
                    channels + index * growth,
                    growth,
                    3,
                    padding=rate,
                    dilation=rate,
                    bias=False,
                ),
                nn.ReLU(inplace=True),
            )
            for index, rate in enumerate(rates)
        )
        self.project = nn.Conv2d(channels + len(rates) * growth, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Return a map of the input shape."""
        features = [x]
        for branch in self.branches:
            features.append(branch(torch.cat(features, dim=1)))
        return self.project(torch.cat(features, dim=1))  # type: ignore[no-any-return]


class GlobalContext(nn.Module):
    """Softmax attention pooling and a bottleneck transform added to every position."""

    def __init__(self, channels: int, reduction: int) -> None:
        """Initialize the attention and transform convolutions."""
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ConfigurationError(
                f"Reduction {reduction} does not divide {channels} channels"
            )
        hidden = channels // reduction
        self.channels = channels
        self.w_k = nn.Conv2d(channels, 1, 1)
        self.w_v1 = nn.Conv2d(channels, hidden, 1)
        self.norm = nn.LayerNorm([hidden, 1, 1])
        self.w_v2 = nn.Conv2d(hidden, channels, 1)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        """Return the (B, H*W) attention over positions."""
        return torch.softmax(self.w_k(x).flatten(1), dim=1)

    def context(self, x: torch.Tensor) -> torch.Tensor:
        """Return the attention-weighted (B, C, 1, 1) context vector."""
        weights = self.attention(x).unsqueeze(-1)
        return torch.bmm(x.flatten(2), weights).unsqueeze(-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Add the transformed context to every position."""
        if x.shape[1] != self.channels:
            raise ShapeError(f"Expected {self.channels} channels, got {x.shape[1]}")
        return x + self.w_v2(self.norm(self.w_v1(self.context(x))))


class ContextAttention(nn.Module):
    """DenseASPP followed by a global context block."""

    def __init__(self, channels: int, reduction: int) -> None:
        """Initialize both stages."""
        super().__init__()
        self.aspp = DenseASPP(channels)
        self.context = GlobalContext(channels, reduction)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Enlarge the receptive field, then add global context."""
        return self.context(self.aspp(x))  # type: ignore[no-any-return]


def _lift(in_channels: int, out_channels: int) -> nn.Sequential:
    """1x1 conv, batch norm and ReLU."""
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 1, bias=False),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
    )


class FeatureFusion(nn.Module):
    """
    Stage maps to the two fused maps consumed by the branches.

    Lateral reduction and BiFPN run over levels 3-5. Resolution fusion runs at
    level 5 over (P5, P4, P3) and at level 4 over (P4, P3, reduced C2); each
    result passes through its own context attention block and is lifted to
    the fused width.
    """

    def __init__(
        self,
        stage_channels: Sequence[int],
        width: int,
        fused_width: int,
        repeats: int,
        reduction: int,
    ) -> None:
        """Initialize the fusion stages."""
        super().__init__()
        self.lateral = LateralReduce(stage_channels, width)
        self.c2_lateral = nn.Conv2d(stage_channels[0], width, 1)
        self.bifpn = BiFPN(width, repeats)
        self.rfb5 = ResolutionFusion(width)
        self.rfb4 = ResolutionFusion(width)
        self.cfae5 = ContextAttention(width, reduction)
        self.cfae4 = ContextAttention(width, reduction)
        self.lift_g = _lift(width, fused_width)
        self.lift_part = _lift(width, fused_width)
        init_weights(self)

    def forward(self, pyramid: StagePyramid) -> FusedFeatureMaps:
        """Fuse the stage maps."""
        levels = self.bifpn(self.lateral(pyramid))
        c2 = self.c2_lateral(pyramid.c2)
        x5 = self.cfae5(self.rfb5(levels.p5, levels.p4, levels.p3))
        x4 = self.cfae4(self.rfb4(levels.p4, levels.p3, c2))
        return FusedFeatureMaps(x_g=self.lift_g(x5), x_part=self.lift_part(x4))
