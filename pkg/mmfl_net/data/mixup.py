"""Mixup for the classification losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..exceptions import ArgumentError


@dataclass
class MixedBatch:
    """Mixed images with the target pair each image was mixed from."""

    images: torch.Tensor
    targets_a: torch.Tensor
    targets_b: torch.Tensor
    lam: float
    permutation: torch.Tensor


def mixup(
    images: torch.Tensor,
    targets: torch.Tensor,
    alpha: float,
    seed: int,
    lam: float | None = None,
) -> MixedBatch:
    """
    Mix each sample with a permuted partner.

    lam is drawn from Beta(alpha, alpha) unless given. Images become
    lam * x + (1 - lam) * x[perm]; targets are returned as the pair
    (targets, targets[perm]) to be weighted by lam and 1 - lam.
    """
    if alpha <= 0:
        raise ArgumentError(f"Mixup alpha must be positive, got {alpha}")
    if images.shape[0] < 2:
        raise ArgumentError("Mixup needs a batch of at least 2 samples")
    rng = np.random.default_rng(seed)
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    generator = torch.Generator().manual_seed(seed)
    permutation = torch.randperm(images.shape[0], generator=generator).to(images.device)
    mixed = lam * images + (1 - lam) * images[permutation]
    return MixedBatch(
        images=mixed,
        targets_a=targets,
        targets_b=targets[permutation],
        lam=lam,
        permutation=permutation,
    )
