"""JSON-lines dataset manifest."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

import voluptuous as vol

from ..config import strict_int
from ..const import DEFAULT_ATTRIBUTE_TYPES, MISSING_ATTRIBUTE, Domain, Split
from ..exceptions import AttributeSchemaError, ConfigurationError, ManifestError

if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping, Sequence

_LOGGER = logging.getLogger(__name__)

BBox = tuple[int, int, int, int]

RECORD_SCHEMA = vol.Schema(
    {
        vol.Required("image_path"): vol.All(str, vol.Length(min=1)),
        vol.Required("pid"): vol.All(strict_int, vol.Range(min=0)),
        vol.Required("domain"): vol.In([domain.value for domain in Domain]),
        vol.Required("split"): vol.In([split.value for split in Split]),
        vol.Optional("attributes"): vol.Any(None, {str: vol.Any(strict_int, str)}),
        vol.Optional("bbox"): vol.Any(
            None,
            vol.ExactSequence(
                [
                    vol.All(strict_int, vol.Range(min=0)),
                    vol.All(strict_int, vol.Range(min=0)),
                    vol.All(strict_int, vol.Range(min=1)),
                    vol.All(strict_int, vol.Range(min=1)),
                ]
            ),
        ),
    }
)


@dataclass(frozen=True)
class AttributeSchema:
    """Ordered attribute types, each with mutually exclusive value names."""

    types: tuple[tuple[str, tuple[str, ...]], ...] = DEFAULT_ATTRIBUTE_TYPES

    def __post_init__(self) -> None:
        """Check that type names and value names are unique."""
        names = [name for name, _ in self.types]
        if len(set(names)) != len(names):
            raise AttributeSchemaError(f"Duplicate attribute types in {names}")
        for name, values in self.types:
            if len(values) < 2:
                raise AttributeSchemaError(f"Attribute {name} needs at least 2 values")
            if len(set(values)) != len(values):
                raise AttributeSchemaError(f"Attribute {name} has duplicate values")

    @classmethod
    def from_config(cls, attributes: Sequence[Sequence[Any]]) -> AttributeSchema:
        """Build a schema from the `data.attributes` config value."""
        return cls(tuple((str(name), tuple(values)) for name, values in attributes))

    @property
    def names(self) -> list[str]:
        """Return the attribute type names in order."""
        return [name for name, _ in self.types]

    @property
    def value_counts(self) -> list[int]:
        """Return the number of values per attribute type."""
        return [len(values) for _, values in self.types]

    def values(self, name: str) -> tuple[str, ...]:
        """Return the value names of one attribute type."""
        for type_name, values in self.types:
            if type_name == name:
                return values
        raise AttributeSchemaError(f"Unknown attribute type: {name}")

    def normalize(self, attributes: Mapping[str, int | str]) -> dict[str, int]:
        """Validate attribute labels and map value names to indices."""
        normalized: dict[str, int] = {}
        for name, value in attributes.items():
            values = self.values(name)
            if isinstance(value, str):
                if value not in values:
                    raise AttributeSchemaError(
                        f"Attribute {name} has no value {value!r}"
                    )
                normalized[name] = values.index(value)
            elif 0 <= value < len(values):
                normalized[name] = value
            else:
                raise AttributeSchemaError(
                    f"Attribute {name} index {value} outside [0, {len(values)})"
                )
        return normalized

    def targets(self, attributes: Mapping[str, int]) -> list[int]:
        """Return one target per type, MISSING_ATTRIBUTE where unlabeled."""
        return [attributes.get(name, MISSING_ATTRIBUTE) for name in self.names]


@dataclass(frozen=True)
class ImageRecord:
    """One manifest row."""

    image_path: str
    pid: int
    domain: Domain
    split: Split
    attributes: dict[str, int] = field(default_factory=dict)
    bbox: BBox | None = None

    def resolve(self, image_root: Path) -> Path:
        """Return the image file path, relative paths taken from the image root."""
        path = Path(self.image_path)
        return path if path.is_absolute() else image_root / path

    def as_json(self) -> dict[str, Any]:
        """Serialize to a manifest line object."""
        data: dict[str, Any] = {
            "image_path": self.image_path,
            "pid": self.pid,
            "domain": self.domain.value,
            "split": self.split.value,
        }
        if self.attributes:
            data["attributes"] = dict(self.attributes)
        if self.bbox is not None:
            data["bbox"] = list(self.bbox)
        return data


def parse_record(data: Any, schema: AttributeSchema) -> ImageRecord:
    """Validate one decoded manifest object."""
    data = RECORD_SCHEMA(data)
    bbox = data.get("bbox")
    return ImageRecord(
        image_path=data["image_path"],
        pid=data["pid"],
        domain=Domain(data["domain"]),
        split=Split(data["split"]),
        attributes=schema.normalize(data.get("attributes") or {}),
        bbox=tuple(bbox) if bbox is not None else None,  # type: ignore[arg-type]
    )


def load_manifest(
    path: Path | str, schema: AttributeSchema | None = None
) -> list[ImageRecord]:
    """Read and validate a JSON-lines manifest, preserving file order."""
    schema = schema or AttributeSchema()
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Manifest not found: {path}")
    records: list[ImageRecord] = []
    with path.open(encoding="utf-8") as manifest:
        for line_number, line in enumerate(manifest, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as err:
                raise ManifestError(line_number, f"invalid JSON: {err.msg}") from err
            try:
                records.append(parse_record(data, schema))
            except vol.Invalid as err:
                raise ManifestError(line_number, str(err)) from err
            except AttributeSchemaError as err:
                raise AttributeSchemaError(f"line {line_number}: {err}") from err
    check_query_coverage(records)
    _LOGGER.debug("Loaded %d records from %s", len(records), path)
    return records


def write_manifest(records: Iterable[ImageRecord], path: Path | str) -> None:
    """Write records as a JSON-lines manifest."""
    with Path(path).open("w", encoding="utf-8") as manifest:
        for record in records:
            manifest.write(json.dumps(record.as_json(), sort_keys=True) + "\n")


def check_query_coverage(records: Sequence[ImageRecord]) -> None:
    """Ensure every query pid has a shop-domain gallery record."""
    gallery = {
        record.pid
        for record in records
        if record.split is Split.GALLERY and record.domain is Domain.SHOP
    }
    missing = sorted(
        {
            record.pid
            for record in records
            if record.split is Split.QUERY and record.pid not in gallery
        }
    )
    if missing:
        raise ConfigurationError(f"Query pids without shop gallery records: {missing}")


def select(
    records: Iterable[ImageRecord],
    split: Split | None = None,
    domain: Domain | None = None,
) -> list[ImageRecord]:
    """Filter records by split and domain."""
    return [
        record
        for record in records
        if (split is None or record.split is split)
        and (domain is None or record.domain is domain)
    ]


def class_mapping(records: Iterable[ImageRecord]) -> dict[int, int]:
    """Map pids to contiguous class indices in ascending pid order."""
    return {pid: index for index, pid in enumerate(sorted({r.pid for r in records}))}
