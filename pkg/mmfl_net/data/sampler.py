"""Cross-domain PK batch sampling."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, NamedTuple

import numpy as np
import torch
from torch.utils.data import Dataset, Sampler

from ..const import Domain
from ..exceptions import ConfigurationError
from .transforms import sample_seed

if TYPE_CHECKING:
    from collections.abc import Iterator, Mapping, Sequence

    from .manifest import AttributeSchema, ImageRecord
    from .transforms import RecordTransform

_LOGGER = logging.getLogger(__name__)

DOMAIN_INDEX = {Domain.CONSUMER: 0, Domain.SHOP: 1}


class SampleKey(NamedTuple):
    """Position of one sample in the epoch stream."""

    index: int
    epoch: int
    position: int


@dataclass
class TripletBatch:
    """A PK batch: `layout[0]` identities, each with `layout[1]` images."""

    images: torch.Tensor
    pids: torch.Tensor
    labels: torch.Tensor
    domains: torch.Tensor
    attribute_targets: torch.Tensor
    layout: tuple[int, int]
    indices: list[int] = field(default_factory=list)
    replacement: bool = False

    @property
    def size(self) -> int:
        """Return the number of images."""
        return int(self.images.shape[0])

    def validate(self) -> None:
        """Check the identity and domain composition of the batch."""
        identities, per_identity = self.layout
        if self.size != identities * per_identity:
            raise ConfigurationError(
                f"Batch of {self.size} images does not match layout {self.layout}"
            )
        pids = self.pids.view(identities, per_identity)
        if not bool((pids == pids[:, :1]).all()):
            raise ConfigurationError("Batch identities are not grouped by layout")
        if len(set(pids[:, 0].tolist())) != identities:
            raise ConfigurationError("Batch repeats an identity")
        half = per_identity // 2
        domains = self.domains.view(identities, per_identity)
        consumer = DOMAIN_INDEX[Domain.CONSUMER]
        if not (
            bool((domains[:, :half] == consumer).all())
            and bool((domains[:, half:] != consumer).all())
        ):
            raise ConfigurationError(
                "Each identity needs K consumer then K shop images"
            )

    def to(self, device: torch.device | str) -> TripletBatch:
        """Move tensors to a device."""
        return TripletBatch(
            images=self.images.to(device),
            pids=self.pids.to(device),
            labels=self.labels.to(device),
            domains=self.domains.to(device),
            attribute_targets=self.attribute_targets.to(device),
            layout=self.layout,
            indices=self.indices,
            replacement=self.replacement,
        )


class RecordDataset(Dataset[tuple[torch.Tensor, int]]):
    """Images of a record list, addressed by index or sample key."""

    def __init__(
        self, records: Sequence[ImageRecord], transform: RecordTransform, seed: int = 0
    ) -> None:
        """Initialize the dataset."""
        self.records = records
        self.transform = transform
        self.seed = seed

    def __len__(self) -> int:
        """Return the number of records."""
        return len(self.records)

    def __getitem__(self, key: int | SampleKey) -> tuple[torch.Tensor, int]:
        """Load one image; sample keys seed the augmentation by stream position."""
        if isinstance(key, SampleKey):
            seed = sample_seed(self.seed, key.epoch, key.position)
            return self.transform(self.records[key.index], seed), key.index
        return self.transform(self.records[key]), key


class PKBatchSampler(Sampler[list[SampleKey]]):
    """Yield P+1 identities per batch, each with K consumer and K shop images."""

    def __init__(
        self, records: Sequence[ImageRecord], p: int, k: int, seed: int = 0
    ) -> None:
        """Index the records by pid and domain."""
        if p < 1 or k < 1:
            raise ConfigurationError(f"P and K must be positive, got P={p}, K={k}")
        self.p = p
        self.k = k
        self.seed = seed
        self.epoch = 0
        self._pools: dict[int, dict[Domain, list[int]]] = defaultdict(
            lambda: {Domain.CONSUMER: [], Domain.SHOP: []}
        )
        for index, record in enumerate(records):
            self._pools[record.pid][record.domain].append(index)
        self.pids = sorted(
            pid for pid, pools in self._pools.items() if all(pools.values())
        )
        if len(self.pids) < p + 1:
            raise ConfigurationError(
                f"Need at least P+1={p + 1} pids with images in both domains, "
                f"found {len(self.pids)}"
            )
        self.short_pids = sorted(
            pid
            for pid in self.pids
            if min(len(pool) for pool in self._pools[pid].values()) < k
        )

    @property
    def layout(self) -> tuple[int, int]:
        """Return (identities per batch, images per identity)."""
        return self.p + 1, 2 * self.k

    @property
    def batch_size(self) -> int:
        """Return the number of images per batch."""
        return 2 * (self.p + 1) * self.k

    def set_epoch(self, epoch: int) -> None:
        """Select the epoch whose batches the next iteration yields."""
        self.epoch = epoch

    def __len__(self) -> int:
        """Return the number of batches per epoch."""
        return math.ceil(len(self.pids) / (self.p + 1))

    def __iter__(self) -> Iterator[list[SampleKey]]:
        """Yield the batches of the current epoch."""
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, self.epoch]))
        order = [int(pid) for pid in rng.permutation(self.pids)]
        group_size = self.p + 1
        if self.short_pids:
            _LOGGER.warning(
                "Epoch %d: %d pids have fewer than K=%d images in a domain, "
                "sampling them with replacement",
                self.epoch,
                len(self.short_pids),
                self.k,
            )
        position = 0
        for start in range(0, len(order), group_size):
            group = order[start : start + group_size]
            if len(group) < group_size:
                others = [pid for pid in self.pids if pid not in group]
                fill = rng.choice(others, size=group_size - len(group), replace=False)
                group.extend(int(pid) for pid in fill)
            batch: list[SampleKey] = []
            for pid in group:
                for domain in (Domain.CONSUMER, Domain.SHOP):
                    pool = self._pools[pid][domain]
                    chosen = rng.choice(pool, size=self.k, replace=len(pool) < self.k)
                    for index in chosen:
                        batch.append(SampleKey(int(index), self.epoch, position))
                        position += 1
            yield batch


class BatchCollator:
    """Assemble loaded samples into a TripletBatch."""

    def __init__(
        self,
        records: Sequence[ImageRecord],
        schema: AttributeSchema,
        class_map: Mapping[int, int],
        layout: tuple[int, int],
    ) -> None:
        """Initialize the collator."""
        self.records = records
        self.schema = schema
        self.class_map = class_map
        self.layout = layout

    def __call__(self, samples: Sequence[tuple[torch.Tensor, int]]) -> TripletBatch:
        """Stack images and label tensors in sample order."""
        indices = [index for _, index in samples]
        records = [self.records[index] for index in indices]
        return TripletBatch(
            images=torch.stack([image for image, _ in samples]),
            pids=torch.tensor([record.pid for record in records], dtype=torch.long),
            labels=torch.tensor(
                [self.class_map[record.pid] for record in records], dtype=torch.long
            ),
            domains=torch.tensor(
                [DOMAIN_INDEX[record.domain] for record in records], dtype=torch.long
            ),
            attribute_targets=torch.tensor(
                [self.schema.targets(record.attributes) for record in records],
                dtype=torch.long,
            ).view(len(records), len(self.schema.names)),
            layout=self.layout,
            indices=indices,
            replacement=len(set(indices)) < len(indices),
        )
