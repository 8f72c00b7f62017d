"""Fixtures for the MMFL retrieval tests."""

from __future__ import annotations

from typing import TYPE_CHECKING

import pytest
import torch

from mmfl_net.data.manifest import AttributeSchema
from mmfl_net.data.synthetic import generate_synthetic_dataset

from . import make_config

if TYPE_CHECKING:
    from collections.abc import Generator

    from mmfl_net.config import Config
    from mmfl_net.data.synthetic import SyntheticDataset


@pytest.fixture(autouse=True)
def deterministic_torch() -> Generator[None]:
    """Run every test single-threaded from a fixed seed."""
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    torch.manual_seed(0)
    yield
    torch.set_num_threads(threads)


@pytest.fixture
def schema() -> AttributeSchema:
    """Return the default upper-wear attribute schema."""
    return AttributeSchema()


@pytest.fixture(scope="session")
def synthetic(tmp_path_factory: pytest.TempPathFactory) -> SyntheticDataset:
    """Six training identities and two held-out ones, two images per domain."""
    return generate_synthetic_dataset(
        tmp_path_factory.mktemp("synthetic"),
        num_pids=8,
        imgs_per_domain=2,
        image_size=48,
        seed=0,
        holdout_pids=2,
    )


@pytest.fixture
def run_config(synthetic: SyntheticDataset) -> Config:
    """A two-epoch micro training configuration over the synthetic dataset."""
    return make_config(
        {
            "data.manifest": str(synthetic.manifest),
            "data.p": 1,
            "data.k": 2,
            "optim.epochs": 2,
            "optim.milestones": [1],
            "eval.period": 1,
            "eval.batch_size": 8,
        }
    )
