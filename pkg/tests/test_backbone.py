"""Tests for the residual backbone."""

from __future__ import annotations

import pytest
import torch
from torch import nn

from mmfl_net.exceptions import ConfigurationError, ShapeError
from mmfl_net.network.backbone import (
    Backbone,
    BackboneConfig,
    Bottleneck,
    InstanceBatchNorm,
)
from mmfl_net.network.const import NormMode

from . import MICRO_MODEL, make_config


def _micro(norm_mode: NormMode = NormMode.INSTANCE_BATCH_MIX) -> Backbone:
    """Build the micro backbone."""
    return Backbone(
        BackboneConfig.from_config(MICRO_MODEL | {"norm_mode": norm_mode.value})
    )


def test_micro_stage_shapes() -> None:
    """Stages sit at strides 4, 8, 16 and 32 with the configured widths."""
    pyramid = _micro()(torch.randn(2, 3, 64, 64))
    assert [tuple(stage.shape) for stage in pyramid.stages()] == [
        (2, 8, 16, 16),
        (2, 16, 8, 8),
        (2, 24, 4, 4),
        (2, 32, 2, 2),
    ]
    assert pyramid.input_size == (64, 64)


def test_tiny_stage_shapes() -> None:
    """The tiny preset maps 64x64 inputs to a 16x16 C2 and a 2x2 C5."""
    config = make_config(micro=False)
    backbone = Backbone(BackboneConfig.from_config(config.section("model")))
    backbone.eval()
    pyramid = backbone(torch.randn(1, 3, 64, 64))
    assert tuple(pyramid.c2.shape) == (1, 16, 16, 16)
    assert tuple(pyramid.c5.shape) == (1, 128, 2, 2)
    assert backbone.config.stage_strides == (4, 8, 16, 32)


@pytest.mark.parametrize("shape", [(1, 3, 100, 100), (1, 3, 64, 48), (1, 1, 64, 64)])
def test_rejects_bad_inputs(shape: tuple[int, ...]) -> None:
    """Inputs need three channels and sides divisible by 32."""
    with pytest.raises(ShapeError):
        _micro()(torch.randn(*shape))


def test_instance_batch_layout() -> None:
    """The mixed layout puts instance norm in the first block of stages one to three."""
    mixed = _micro(NormMode.INSTANCE_BATCH_MIX)
    plain = _micro(NormMode.BATCH)
    for index, stage in enumerate(mixed.stages):
        first = stage[0]
        assert isinstance(first, Bottleneck)
        assert isinstance(first.bn1, InstanceBatchNorm) == (index < 3)
    assert not any(isinstance(m, InstanceBatchNorm) for m in plain.modules())


def test_instance_batch_norm_splits_channels() -> None:
    """Half the channels are normalized per instance, the rest per batch."""
    norm = InstanceBatchNorm(6)
    x = torch.randn(4, 6, 5, 5) * 3 + 2
    out = norm(x)
    per_instance = out[:, :3].mean(dim=(2, 3))
    assert torch.allclose(per_instance, torch.zeros_like(per_instance), atol=1e-5)
    per_batch = out[:, 3:].mean(dim=(0, 2, 3))
    assert torch.allclose(per_batch, torch.zeros_like(per_batch), atol=1e-5)


def test_config_validation() -> None:
    """Stage widths must increase and every stage needs a block."""
    with pytest.raises(ConfigurationError):
        BackboneConfig(stage_channels=(8, 8, 16, 32))
    with pytest.raises(ConfigurationError):
        BackboneConfig(blocks_per_stage=(1, 0, 1, 1))


def test_initialization() -> None:
    """Convolutions get fan-in scaled normal weights; norms start at identity."""
    backbone = Backbone(BackboneConfig())
    conv = backbone.stages[3][0].conv2
    assert isinstance(conv, nn.Conv2d)
    fan_in = conv.in_channels * 9
    expected = (2.0 / fan_in) ** 0.5
    assert abs(float(conv.weight.std()) - expected) / expected < 0.05
    for module in backbone.modules():
        if isinstance(module, nn.BatchNorm2d):
            assert torch.all(module.weight == 1)
            assert torch.all(module.bias == 0)


def test_gradients_match_finite_differences() -> None:
    """Analytic input gradients agree with central differences in float64."""
    backbone = _micro().double().eval()
    images = torch.randn(1, 3, 32, 32, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(
        lambda x: backbone(x).c5,
        (images,),
        eps=1e-6,
        atol=1e-5,
        rtol=1e-3,
        fast_mode=True,
    )
