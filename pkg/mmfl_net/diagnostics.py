"""Parameter, multiply-add and timing statistics of a network."""

from __future__ import annotations

import io
import logging
import statistics
import time
from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING, Any

import torch
from torch import nn

if TYPE_CHECKING:
    from collections.abc import Iterator

_LOGGER = logging.getLogger(__name__)

DEFAULT_TIMING_RUNS = 50
DEFAULT_WARMUP_RUNS = 3


@dataclass
class ModelStats:
    """Reported, not asserted, figures of one network."""

    parameters: int
    multiply_adds: int
    latency_ms: float
    size_mb: float
    throughput: float
    batch_size: int
    input_size: int

    def as_json(self) -> dict[str, Any]:
        """Serialize, adding the counts in millions and billions."""
        return asdict(self) | {
            "parameters_m": self.parameters / 1e6,
            "multiply_adds_g": self.multiply_adds / 1e9,
        }


def count_parameters(module: nn.Module) -> int:
    """Return the exact number of parameters."""
    return sum(parameter.numel() for parameter in module.parameters())


def layer_multiply_adds(module: nn.Module, output: torch.Tensor) -> int:
    """Multiply-adds of one convolution or linear call for its output tensor."""
    if isinstance(module, (nn.Conv1d, nn.Conv2d)):
        kernel = 1
        for size in module.kernel_size:
            kernel *= size
        return output.numel() * (module.in_channels // module.groups) * kernel
    if isinstance(module, nn.Linear):
        return output.numel() * module.in_features
    return 0


def _counted_layers(model: nn.Module) -> Iterator[nn.Module]:
    """Yield the layers whose multiply-adds are counted."""
    for module in model.modules():
        if isinstance(module, (nn.Conv1d, nn.Conv2d, nn.Linear)):
            yield module


@torch.no_grad()
def count_multiply_adds(model: nn.Module, images: torch.Tensor) -> int:
    """Sum the analytic multiply-adds of the convolution and linear layers."""
    total = 0

    def hook(module: nn.Module, _inputs: Any, output: torch.Tensor) -> None:
        nonlocal total
        total += layer_multiply_adds(module, output)

    handles = [layer.register_forward_hook(hook) for layer in _counted_layers(model)]
    try:
        model(images)
    finally:
        for handle in handles:
            handle.remove()
    return total


def serialized_size_mb(model: nn.Module) -> float:
    """Return the size of the saved state dict in megabytes."""
    buffer = io.BytesIO()
    torch.save(model.state_dict(), buffer)
    return buffer.getbuffer().nbytes / 2**20


@torch.no_grad()
def median_latency(
    model: nn.Module, images: torch.Tensor, runs: int, warmup: int
) -> float:
    """Median wall-clock seconds of one forward pass."""
    for _ in range(warmup):
        model(images)
    timings = []
    for _ in range(runs):
        start = time.perf_counter()
        model(images)
        timings.append(time.perf_counter() - start)
    return statistics.median(timings)


def report_model_stats(
    model: nn.Module,
    input_size: int,
    batch_size: int = 8,
    runs: int = DEFAULT_TIMING_RUNS,
    warmup: int = DEFAULT_WARMUP_RUNS,
    seed: int = 0,
) -> ModelStats:
    """
    Measure a network in evaluation mode.

    Latency is the median of `runs` single-image passes after `warmup`
    untimed ones; throughput is images per second at `batch_size`.
    """
    was_training = model.training
    model.eval()
    generator = torch.Generator().manual_seed(seed)
    device = next(model.parameters()).device
    shape = (3, input_size, input_size)
    single = torch.randn(1, *shape, generator=generator).to(device)
    batch = torch.randn(batch_size, *shape, generator=generator).to(device)
    try:
        multiply_adds = count_multiply_adds(model, single)
        latency = median_latency(model, single, runs, warmup)
        batch_seconds = median_latency(model, batch, max(1, runs // 10), 1)
    finally:
        model.train(was_training)
    stats = ModelStats(
        parameters=count_parameters(model),
        multiply_adds=multiply_adds,
        latency_ms=latency * 1e3,
        size_mb=serialized_size_mb(model),
        throughput=batch_size / batch_seconds if batch_seconds > 0 else float("inf"),
        batch_size=batch_size,
        input_size=input_size,
    )
    _LOGGER.info(
        "%.2fM parameters, %.2fG multiply-adds, %.1f ms per image",
        stats.parameters / 1e6,
        stats.multiply_adds / 1e9,
        stats.latency_ms,
    )
    return stats
