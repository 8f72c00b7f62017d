"""Errors raised by the MMFL retrieval package."""

from __future__ import annotations

from typing import Any


class MMFLError(Exception):
    """Base class for every error the package raises on purpose."""


class ConfigurationError(MMFLError):
    """A configuration key, value or dataset composition is not usable."""


class ManifestError(MMFLError):
    """A manifest line could not be parsed."""

    def __init__(self, line_number: int, message: str) -> None:
        """Initialize the error with the 1-based manifest line number."""
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class AttributeSchemaError(MMFLError):
    """An attribute type or value is outside the attribute schema."""


class ShapeError(MMFLError):
    """A tensor does not have the shape an operation requires."""


class ArgumentError(MMFLError, ValueError):
    """An operation argument is out of range."""


class NonFiniteLossError(MMFLError):
    """A training step produced a non-finite loss."""

    def __init__(self, message: str, diagnostics: dict[str, Any]) -> None:
        """Initialize the error with the diagnostic dump of the failing step."""
        super().__init__(message)
        self.diagnostics = diagnostics


class CheckpointError(MMFLError):
    """A checkpoint is missing, corrupt or of an unsupported version."""


class EmbeddingStoreError(MMFLError):
    """An embedding store cannot be built, read or compared."""
