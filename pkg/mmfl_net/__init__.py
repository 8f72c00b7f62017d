"""Multi-branch, multi-scale feature learning for clothing retrieval."""

from .checkpoint import Checkpoint, load_checkpoint, restore_model, save_checkpoint
from .config import Config, resolve_config
from .exceptions import MMFLError
from .trainer import FitResult, Trainer, fit, lr_at

__all__ = [
    "Checkpoint",
    "Config",
    "FitResult",
    "MMFLError",
    "Trainer",
    "fit",
    "load_checkpoint",
    "lr_at",
    "resolve_config",
    "restore_model",
    "save_checkpoint",
]
