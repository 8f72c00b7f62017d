"""Versioned training checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import TYPE_CHECKING, Any

import torch

from .config import config_from_snapshot
from .const import CHECKPOINT_FORMAT_VERSION
from .data.manifest import AttributeSchema
from .exceptions import CheckpointError
from .network.model import build_model

if TYPE_CHECKING:
    from .config import Config
    from .network.model import MMFLNet

_LOGGER = logging.getLogger(__name__)


@dataclass
class Checkpoint:
    """
    Everything needed to resume training or rebuild the model.

    `config` is the canonical JSON snapshot of the run configuration and
    `class_pids` lists the pid of every identity class in label order.
    """

    epoch: int
    config: str
    class_pids: list[int]
    model: dict[str, torch.Tensor]
    criterion: dict[str, torch.Tensor]
    optimizer: dict[str, Any] = field(default_factory=dict)
    center_optimizer: dict[str, Any] = field(default_factory=dict)
    scheduler: dict[str, Any] = field(default_factory=dict)
    rng: dict[str, torch.Tensor] = field(default_factory=dict)
    history: list[dict[str, Any]] = field(default_factory=list)
    best_map: float = -1.0
    format_version: int = CHECKPOINT_FORMAT_VERSION

    def as_dict(self) -> dict[str, Any]:
        """Return the fields without copying tensors."""
        return {item.name: getattr(self, item.name) for item in fields(self)}

    def resolved_config(self) -> Config:
        """Rebuild the configuration the checkpoint was written with."""
        return config_from_snapshot(json.loads(self.config))


def save_checkpoint(checkpoint: Checkpoint, path: Path | str) -> Path:
    """Write a checkpoint atomically through a temporary file."""
    path = Path(path)
    partial = path.with_name(f"{path.name}.partial")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(checkpoint.as_dict(), partial)
        partial.replace(path)
    except (OSError, RuntimeError) as err:
        raise CheckpointError(f"Cannot write checkpoint {path}: {err}") from err
    _LOGGER.debug("Wrote checkpoint %s (epoch %d)", path, checkpoint.epoch)
    return path


def load_checkpoint(path: Path | str) -> Checkpoint:
    """Read a checkpoint written by `save_checkpoint`."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        data = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as err:
        raise CheckpointError(f"Cannot read checkpoint {path}: {err}") from err
    if not isinstance(data, dict):
        raise CheckpointError(f"Checkpoint {path} does not hold a mapping")
    version = data.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"Checkpoint {path} has format version {version}, "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )
    known = {item.name for item in fields(Checkpoint)}
    try:
        return Checkpoint(**{key: value for key, value in data.items() if key in known})
    except TypeError as err:
        raise CheckpointError(f"Checkpoint {path} is incomplete: {err}") from err


def restore_model(checkpoint: Checkpoint) -> tuple[MMFLNet, Config]:
    """Rebuild the network of a checkpoint in evaluation mode."""
    config = checkpoint.resolved_config()
    schema = AttributeSchema.from_config(config.get("data.attributes"))
    model = build_model(
        config.section("model"), len(checkpoint.class_pids), schema.value_counts
    )
    try:
        model.load_state_dict(checkpoint.model)
    except RuntimeError as err:
        raise CheckpointError(
            f"Checkpoint weights do not fit the network: {err}"
        ) from err
    model.eval()
    return model, config
