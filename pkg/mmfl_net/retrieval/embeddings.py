"""Embedding store: extraction and the binary file format."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import torch
from torch.utils.data import DataLoader

from ..const import STORE_MAGIC, STORE_META_SUFFIX, Domain
from ..data.sampler import RecordDataset
from ..data.transforms import require_images
from ..exceptions import EmbeddingStoreError

if TYPE_CHECKING:
    from collections.abc import Sequence

    from ..data.manifest import ImageRecord
    from ..data.transforms import RecordTransform
    from ..network.const import Branch
    from ..network.model import MMFLNet

_LOGGER = logging.getLogger(__name__)

_HEADER = struct.Struct("<IQ")
NORM_TOLERANCE = 1e-5


def meta_path(path: Path) -> Path:
    """Return the sidecar metadata path of a store file."""
    return path.with_name(path.name + STORE_META_SUFFIX)


@dataclass
class EmbeddingStore:
    """Row-aligned float32 embeddings with pid, domain and path metadata."""

    matrix: np.ndarray
    pids: list[int] = field(default_factory=list)
    domains: list[Domain] = field(default_factory=list)
    paths: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        """Check the row alignment and finiteness."""
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2:
            raise EmbeddingStoreError(
                f"Expected an N x D matrix, got {self.matrix.shape}"
            )
        rows = self.matrix.shape[0]
        if not len(self.pids) == len(self.domains) == len(self.paths) == rows:
            raise EmbeddingStoreError("Metadata is not aligned with the matrix rows")
        if not np.isfinite(self.matrix).all():
            raise EmbeddingStoreError("Embedding rows must be finite")

    def __len__(self) -> int:
        """Return the number of rows."""
        return int(self.matrix.shape[0])

    @property
    def dim(self) -> int:
        """Return the embedding width."""
        return int(self.matrix.shape[1])

    @property
    def normalized(self) -> bool:
        """Return whether every row has unit norm."""
        norms = np.linalg.norm(self.matrix.astype(np.float64), axis=1)
        return bool(np.all(np.abs(norms - 1.0) <= NORM_TOLERANCE))

    def subset(self, rows: Sequence[int]) -> EmbeddingStore:
        """Return the store restricted to some rows, in the given order."""
        return EmbeddingStore(
            matrix=self.matrix[list(rows)].reshape(len(rows), self.dim),
            pids=[self.pids[row] for row in rows],
            domains=[self.domains[row] for row in rows],
            paths=[self.paths[row] for row in rows],
        )

    def save(self, path: Path | str) -> None:
        """Write the binary store and its metadata sidecar."""
        path = Path(path)
        try:
            with path.open("wb") as store:
                store.write(STORE_MAGIC)
                store.write(_HEADER.pack(self.dim, len(self)))
                store.write(self.matrix.astype("<f4", copy=False).tobytes(order="C"))
            with meta_path(path).open("w", encoding="utf-8") as meta:
                for row, (pid, domain, image) in enumerate(
                    zip(self.pids, self.domains, self.paths, strict=True)
                ):
                    entry = {"row": row, "pid": pid, "domain": domain.value}
                    meta.write(json.dumps(entry | {"path": image}) + "\n")
        except OSError as err:
            raise EmbeddingStoreError(f"Cannot write store {path}: {err}") from err

    @classmethod
    def load(cls, path: Path | str) -> EmbeddingStore:
        """Read a store written by `save`."""
        path = Path(path)
        try:
            data = path.read_bytes()
            lines = meta_path(path).read_text(encoding="utf-8").splitlines()
        except OSError as err:
            raise EmbeddingStoreError(f"Cannot read store {path}: {err}") from err
        if not data.startswith(STORE_MAGIC):
            raise EmbeddingStoreError(f"{path} is not an embedding store")
        offset = len(STORE_MAGIC)
        dim, count = _HEADER.unpack_from(data, offset)
        offset += _HEADER.size
        expected = offset + 4 * dim * count
        if len(data) != expected:
            raise EmbeddingStoreError(
                f"{path} holds {len(data)} bytes, header implies {expected}"
            )
        matrix = (
            np.frombuffer(data, dtype="<f4", count=count * dim, offset=offset).reshape(
                count, dim
            )
            if count * dim
            else np.zeros((count, dim), dtype=np.float32)
        )
        meta = [json.loads(line) for line in lines if line.strip()]
        if [entry["row"] for entry in meta] != list(range(count)):
            raise EmbeddingStoreError(f"{meta_path(path)} rows do not match the store")
        return cls(
            matrix=matrix.astype(np.float32),
            pids=[int(entry["pid"]) for entry in meta],
            domains=[Domain(entry["domain"]) for entry in meta],
            paths=[str(entry["path"]) for entry in meta],
        )


def extract_embeddings(
    model: MMFLNet,
    records: Sequence[ImageRecord],
    transform: RecordTransform,
    batch_size: int = 32,
    device: torch.device | str = "cpu",
    branch: Branch | None = None,
    num_workers: int = 0,
) -> EmbeddingStore:
    """Embed records in order with the model in evaluation mode."""
    require_images(records, transform.image_root)
    dim = model.config.pid_hidden if branch is not None else model.embedding_dim
    if not records:
        _LOGGER.warning("Extracting an empty split")
        return EmbeddingStore(matrix=np.zeros((0, dim), dtype=np.float32))
    was_training = model.training
    model.eval()
    loader = DataLoader(
        RecordDataset(records, transform),
        batch_size=batch_size,
        shuffle=False,
        num_workers=num_workers,
    )
    chunks = []
    for images, _ in loader:
        chunks.append(model.embed(images.to(device), branch=branch).cpu().numpy())
    model.train(was_training)
    return EmbeddingStore(
        matrix=np.concatenate(chunks, axis=0),
        pids=[record.pid for record in records],
        domains=[record.domain for record in records],
        paths=[record.image_path for record in records],
    )
