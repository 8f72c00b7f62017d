"""Tests for the metric, center and classification losses."""

from __future__ import annotations

import math

import pytest
import torch
import torch.nn.functional as F

from mmfl_net.const import MISSING_ATTRIBUTE
from mmfl_net.data.mixup import MixedBatch
from mmfl_net.exceptions import ArgumentError
from mmfl_net.losses import (
    CenterLoss,
    LossWeights,
    MultiTaskCriterion,
    ce_loss,
    classification_losses,
    lsr_loss,
    total_loss,
    trihard_loss,
)

from . import (
    MICRO_METRIC_DIM,
    brute_force_ce,
    brute_force_center,
    brute_force_lsr,
    brute_force_trihard,
    make_model,
    mixed_form_lsr,
)

GRADCHECK = {"eps": 1e-5, "atol": 1e-6, "rtol": 1e-3}


def test_trihard_identical_features() -> None:
    """Identical features give the margin once per anchor."""
    features = torch.ones(4, 3)
    pids = torch.tensor([0, 0, 1, 1])
    assert math.isclose(float(trihard_loss(features, pids, 0.3)), 1.2, rel_tol=1e-6)


def test_trihard_separated_clusters() -> None:
    """Clusters farther apart than the margin give zero loss."""
    features = torch.tensor([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [0.0, 3.0]])
    pids = torch.tensor([5, 5, 9, 9])
    assert float(trihard_loss(features, pids, 0.3)) == 0.0


def test_trihard_matches_pairwise_oracle() -> None:
    """A random 3x2 batch agrees with an exhaustive pairwise evaluation."""
    features = torch.randn(6, 8, dtype=torch.float64)
    pids = torch.tensor([0, 0, 1, 1, 2, 2])
    expected = brute_force_trihard(features.tolist(), pids.tolist(), 0.3)
    assert abs(float(trihard_loss(features, pids, 0.3)) - expected) <= 1e-6


def test_trihard_scale_invariance() -> None:
    """Features are normalized first, so a common scale changes nothing."""
    features = torch.randn(8, 5, dtype=torch.float64)
    pids = torch.tensor([0, 0, 1, 1, 2, 2, 3, 3])
    scaled = trihard_loss(features * 3.7, pids)
    assert torch.isclose(trihard_loss(features, pids), scaled)
    assert float(trihard_loss(features, pids)) >= 0


def test_trihard_needs_two_identities() -> None:
    """A batch without negatives is rejected."""
    with pytest.raises(ArgumentError):
        trihard_loss(torch.randn(4, 3), torch.zeros(4, dtype=torch.long))


def test_center_loss() -> None:
    """Half the squared distance to each sample's center, summed."""
    center = CenterLoss(1, 2)
    with torch.no_grad():
        center.centers.zero_()
    assert float(center(torch.tensor([[3.0, 4.0]]), torch.tensor([0]))) == 12.5

    center = CenterLoss(3, 4).double()
    labels = torch.tensor([2, 0, 2, 1])
    features = center.centers[labels].detach().clone()
    assert float(center(features, labels)) == 0.0
    features = torch.randn(4, 4, dtype=torch.float64)
    expected = brute_force_center(
        features.tolist(), center.centers.tolist(), labels.tolist()
    )
    assert abs(float(center(features, labels)) - expected) <= 1e-6
    with pytest.raises(ArgumentError):
        center(features, torch.tensor([0, 1, 3, 0]))


def test_lsr_smoothed_distribution() -> None:
    """With K=4 and eps 0.1 the target weight is 0.925 and the rest 0.025."""
    logits = torch.randn(1, 4, dtype=torch.float64)
    log_probs = F.log_softmax(logits, dim=1)[0]
    expected = -(0.925 * log_probs[2] + 0.025 * (log_probs.sum() - log_probs[2]))
    assert torch.isclose(lsr_loss(logits, torch.tensor([2]), 0.1), expected)


@pytest.mark.parametrize("epsilon", [0.0, 0.1, 0.5])
def test_lsr_uniform_logits(epsilon: float) -> None:
    """Uniform logits cost log K whatever the smoothing."""
    loss = lsr_loss(torch.zeros(3, 4), torch.tensor([0, 1, 3]), epsilon)
    assert math.isclose(float(loss), math.log(4), rel_tol=1e-6)


def test_lsr_decomposition() -> None:
    """The summation form equals (1 - eps) CE + eps uniform CE for 1000 draws."""
    generator = torch.Generator().manual_seed(1)
    for _ in range(1000):
        classes = int(torch.randint(2, 8, (1,), generator=generator))
        logits = torch.randn(1, classes, dtype=torch.float64, generator=generator) * 3
        target = torch.randint(0, classes, (1,), generator=generator)
        epsilon = float(torch.rand(1, generator=generator)) * 0.9
        loss = float(lsr_loss(logits, target, epsilon))
        rows, labels = logits.tolist(), target.tolist()
        assert abs(loss - mixed_form_lsr(rows, labels, epsilon)) <= 1e-6
        assert abs(loss - brute_force_lsr(rows, labels, epsilon)) <= 1e-6


def test_lsr_skips_missing_targets() -> None:
    """Unlabeled rows contribute nothing; all-unlabeled batches cost zero."""
    logits = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    targets = torch.tensor([1, MISSING_ATTRIBUTE, 3])
    expected = brute_force_lsr(logits.tolist(), targets.tolist(), 0.1)
    assert abs(float(lsr_loss(logits, targets, 0.1)) - expected) <= 1e-9
    empty = lsr_loss(logits, torch.full((3,), MISSING_ATTRIBUTE), 0.1)
    assert float(empty) == 0.0
    empty.backward()
    assert logits.grad is not None
    assert torch.all(logits.grad == 0)


def test_lsr_rejects_bad_targets() -> None:
    """Targets outside the value range and single-class heads are errors."""
    with pytest.raises(ArgumentError):
        lsr_loss(torch.zeros(2, 4), torch.tensor([0, 4]))
    with pytest.raises(ArgumentError):
        lsr_loss(torch.zeros(2, 1), torch.tensor([0, 0]))


def test_ce_limits_and_oracle() -> None:
    """A dominant target logit costs nothing; uniform logits cost log K."""
    logits = torch.zeros(1, 4, dtype=torch.float64)
    logits[0, 2] = 30.0
    assert float(ce_loss(logits, torch.tensor([2]))) < 1e-12
    uniform = float(ce_loss(torch.zeros(2, 5), torch.tensor([0, 4])))
    assert math.isclose(uniform, math.log(5), rel_tol=1e-6)
    logits = torch.randn(6, 7, dtype=torch.float64)
    targets = torch.randint(0, 7, (6,))
    loss = float(ce_loss(logits, targets))
    assert abs(loss - brute_force_ce(logits.tolist(), targets.tolist())) <= 1e-9
    assert abs(loss - float(lsr_loss(logits, targets, 0.0))) <= 1e-9
    with pytest.raises(ArgumentError):
        ce_loss(logits, torch.full((6,), 7))


def test_total_loss_weights() -> None:
    """Components combine as lsr + ce + 1.5 triplet + 0.0005 center by default."""
    one = torch.tensor(1.0, dtype=torch.float64)
    report = total_loss(one, one, one, one, LossWeights())
    assert math.isclose(float(report.total), 3.5005, rel_tol=1e-12)
    assert report.as_dict() == {
        "lsr": 1.0,
        "ce": 1.0,
        "triplet": 1.0,
        "center": 1.0,
        "total": pytest.approx(3.5005),
    }
    report = total_loss(one, 2 * one, 5 * one, 7 * one, LossWeights(0.0, 0.0))
    assert float(report.total) == 3.0
    assert report.is_finite()


def test_loss_weight_ranges() -> None:
    """The margin is non-negative and the smoothing below one."""
    with pytest.raises(ArgumentError):
        LossWeights(margin=-0.1)
    with pytest.raises(ArgumentError):
        LossWeights(smoothing=1.0)
    weights = LossWeights.from_config(
        {"gamma_triplet": 2, "beta_center": 0, "margin": 0.5, "smoothing": 0}
    )
    assert weights == LossWeights(2.0, 0.0, 0.5, 0.0)


def test_loss_gradients_match_finite_differences() -> None:
    """Every loss and their weighted total pass a float64 gradient check."""
    pids = torch.tensor([0, 0, 1, 1, 2, 2])
    features = torch.randn(6, 5, dtype=torch.float64, requires_grad=True)
    centers = CenterLoss(3, 5).double()
    projection = torch.randn(5, 3, dtype=torch.float64)
    attributes = torch.tensor([0, 2, MISSING_ATTRIBUTE, 1, 1, 0])
    weights = LossWeights()

    def total(x: torch.Tensor) -> torch.Tensor:
        logits = x @ projection
        return total_loss(
            lsr_loss(logits, attributes, 0.1),
            ce_loss(logits, pids),
            trihard_loss(x, pids, 0.3),
            centers(F.normalize(x, dim=1), pids),
            weights,
        ).total

    checks = [
        lambda x: trihard_loss(x, pids, 0.3),
        lambda x: centers(x, pids),
        lambda x: lsr_loss(x[:, :4], attributes, 0.1),
        lambda x: ce_loss(x, pids),
        total,
    ]
    for check in checks:
        assert torch.autograd.gradcheck(check, (features,), **GRADCHECK)


def test_total_gradient_is_weighted_sum() -> None:
    """The total's feature gradient is the weighted sum of the component gradients."""
    features = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    pids = torch.tensor([0, 0, 1, 1])
    centers = CenterLoss(2, 3).double()
    weights = LossWeights()
    components = [
        lsr_loss(features, pids, weights.smoothing),
        ce_loss(features, pids),
        trihard_loss(features, pids, weights.margin),
        centers(features, pids),
    ]
    report = total_loss(*components, weights)
    (total_grad,) = torch.autograd.grad(report.total, features, retain_graph=True)
    expected = torch.zeros_like(features)
    for scale, component in zip(
        (1.0, 1.0, weights.gamma_triplet, weights.beta_center), components, strict=True
    ):
        (grad,) = torch.autograd.grad(component, features, retain_graph=True)
        expected += scale * grad
    assert torch.allclose(total_grad, expected)


def test_classification_losses_average_heads() -> None:
    """CE and LSR are averaged over every branch head."""
    model = make_model(num_classes=3)
    output = model(torch.randn(4, 3, 64, 64))
    labels = torch.tensor([0, 1, 2, 1])
    attributes = torch.tensor(
        [[0, 1, 5, 3], [1, -1, 0, 0], [2, 2, 1, -1], [3, 0, 2, 1]]
    )
    targets = torch.cat([labels.unsqueeze(1), attributes], dim=1)
    lsr, ce = classification_losses(output, targets, 0.1)
    heads = list(output.heads.values())
    expected_ce = sum(
        F.cross_entropy(head.logits, labels) for head in heads
    ) / len(heads)
    expected_lsr = sum(
        lsr_loss(log_probs, attributes[:, column], 0.1)
        for head in heads
        for column, log_probs in enumerate(head.attribute_log_probs)
    ) / (len(heads) * 4)
    assert torch.isclose(ce, expected_ce)
    assert torch.isclose(lsr, expected_lsr)


def test_criterion_with_and_without_mixup() -> None:
    """Mixup at lambda one reproduces the unmixed losses."""
    model = make_model(num_classes=2)
    output = model(torch.randn(4, 3, 64, 64))
    labels = torch.tensor([0, 0, 1, 1])
    attributes = torch.full((4, 4), MISSING_ATTRIBUTE)
    criterion = MultiTaskCriterion(2, MICRO_METRIC_DIM, LossWeights())
    plain = criterion(output, labels, attributes)
    targets = torch.cat([labels.unsqueeze(1), attributes], dim=1)
    permutation = torch.tensor([3, 2, 1, 0])
    mixed = MixedBatch(
        images=torch.zeros(4, 3, 64, 64),
        targets_a=targets,
        targets_b=targets[permutation],
        lam=1.0,
        permutation=permutation,
    )
    report = criterion(output, labels, attributes, mixed=mixed, metric_output=output)
    for name, value in plain.as_dict().items():
        assert report.as_dict()[name] == pytest.approx(value)
    assert float(plain.lsr) == 0.0
    assert criterion.center.centers.shape == (2, MICRO_METRIC_DIM)
