"""Console and training-history logging."""

from __future__ import annotations

import json
import logging
from contextlib import contextmanager
from typing import TYPE_CHECKING, Any

import colorlog

from .const import PACKAGE

if TYPE_CHECKING:
    from collections.abc import Iterator
    from pathlib import Path

HISTORY_LOGGER = f"{PACKAGE}.history"

CONSOLE_FORMAT = (
    "%(asctime)s.%(msecs)03d %(levelname)s (%(threadName)s) [%(name)s] %(message)s"
)
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"
LOG_COLORS = {
    "DEBUG": "cyan",
    "INFO": "green",
    "WARNING": "yellow",
    "ERROR": "red",
    "CRITICAL": "red",
}

history_logger = logging.getLogger(HISTORY_LOGGER)
history_logger.propagate = False

_console_handler: logging.Handler | None = None


def setup_console(level: str = "INFO") -> None:
    """Attach a colored console handler to the root logger, replacing an earlier one."""
    global _console_handler  # noqa: PLW0603
    root = logging.getLogger()
    if _console_handler is not None:
        root.removeHandler(_console_handler)
    _console_handler = colorlog.StreamHandler()
    _console_handler.setFormatter(
        colorlog.ColoredFormatter(
            f"%(log_color)s{CONSOLE_FORMAT}%(reset)s",
            datefmt=DATE_FORMAT,
            log_colors=LOG_COLORS,
        )
    )
    root.addHandler(_console_handler)
    root.setLevel(level.upper())


class JsonLinesFormatter(logging.Formatter):
    """Format a record's `metrics` extra as one JSON object per line."""

    def format(self, record: logging.LogRecord) -> str:
        """Return the metrics, tagged with the message as the record kind."""
        metrics: dict[str, Any] = getattr(record, "metrics", {})
        return json.dumps({"kind": record.getMessage(), **metrics}, sort_keys=True)


def log_metrics(kind: str, metrics: dict[str, Any]) -> None:
    """Emit one structured history record."""
    history_logger.info(kind, extra={"metrics": metrics})


@contextmanager
def history_file(path: Path) -> Iterator[None]:
    """Append history records to a JSON-lines file for the duration of the block."""
    handler = logging.FileHandler(path, encoding="utf-8")
    handler.setFormatter(JsonLinesFormatter())
    handler.setLevel(logging.INFO)
    history_logger.addHandler(handler)
    previous = history_logger.level
    history_logger.setLevel(logging.INFO)
    try:
        yield
    finally:
        history_logger.removeHandler(handler)
        history_logger.setLevel(previous)
        handler.close()
