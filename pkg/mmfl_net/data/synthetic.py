"""Procedural consumer/shop dataset for desk-scale runs."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageColor, ImageDraw, ImageEnhance

from ..const import Domain, Split
from ..exceptions import ConfigurationError
from .manifest import AttributeSchema, ImageRecord, write_manifest

_LOGGER = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
IMAGE_DIR = "images"
SHAPES = ("ellipse", "square", "triangle", "diamond")


@dataclass(frozen=True)
class GarmentPattern:
    """Procedural appearance of one product identity."""

    hue: int
    stripes: int
    vertical: bool
    shape: int

    @classmethod
    def for_pid(cls, pid: int, num_pids: int, seed: int) -> GarmentPattern:
        """Draw a pattern; hues are spread over the pid range."""
        rng = np.random.default_rng(np.random.SeedSequence([seed, pid]))
        base = 360 * pid / num_pids
        return cls(
            hue=int(base + rng.integers(0, max(1, 360 // (2 * num_pids)))) % 360,
            stripes=int(rng.integers(2, 7)),
            vertical=bool(rng.integers(0, 2)),
            shape=int(rng.integers(0, len(SHAPES))),
        )

    @property
    def color(self) -> tuple[int, int, int]:
        """Return the base RGB color."""
        return _hsv(self.hue, 80, 85)

    @property
    def stripe_color(self) -> tuple[int, int, int]:
        """Return the stripe RGB color."""
        return _hsv(self.hue, 90, 45)

    @property
    def shape_color(self) -> tuple[int, int, int]:
        """Return the overlay RGB color."""
        return _hsv((self.hue + 180) % 360, 70, 95)

    def attributes(self, schema: AttributeSchema) -> dict[str, int]:
        """Assign attribute values deterministically from the pattern."""
        params = [
            self.stripes,
            self.shape,
            self.hue // 60,
            int(self.vertical) + self.stripes,
        ]
        return {
            name: params[index % len(params)] % count
            for index, (name, count) in enumerate(
                zip(schema.names, schema.value_counts, strict=True)
            )
        }


@dataclass(frozen=True)
class SyntheticDataset:
    """Location and records of a generated dataset."""

    root: Path
    manifest: Path
    records: list[ImageRecord]


def _hsv(hue: int, saturation: int, value: int) -> tuple[int, int, int]:
    """Convert HSV (degrees, percent, percent) to RGB."""
    red, green, blue, *_ = ImageColor.getrgb(f"hsv({hue},{saturation}%,{value}%)")
    return red, green, blue


def _draw_garment(
    draw: ImageDraw.ImageDraw,
    pattern: GarmentPattern,
    box: tuple[int, int, int, int],
) -> None:
    """Draw the striped body and the shape overlay inside a box."""
    left, top, right, bottom = box
    draw.rectangle(box, fill=pattern.color)
    width, height = right - left, bottom - top
    stripe_color = pattern.stripe_color
    for stripe in range(pattern.stripes):
        if pattern.vertical:
            x = left + (2 * stripe + 1) * width // (2 * pattern.stripes)
            right_edge = x + max(1, width // 16)
            draw.rectangle((x, top, right_edge, bottom), fill=stripe_color)
        else:
            y = top + (2 * stripe + 1) * height // (2 * pattern.stripes)
            bottom_edge = y + max(1, height // 16)
            draw.rectangle((left, y, right, bottom_edge), fill=stripe_color)
    cx, cy = (left + right) // 2, (top + bottom) // 2
    r = max(2, min(width, height) // 5)
    shape = SHAPES[pattern.shape]
    fill = pattern.shape_color
    if shape == "ellipse":
        draw.ellipse((cx - r, cy - r, cx + r, cy + r), fill=fill)
    elif shape == "square":
        draw.rectangle((cx - r, cy - r, cx + r, cy + r), fill=fill)
    elif shape == "triangle":
        draw.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=fill)
    else:
        diamond = [(cx, cy - r), (cx + r, cy), (cx, cy + r), (cx - r, cy)]
        draw.polygon(diamond, fill=fill)


def render(
    pattern: GarmentPattern, domain: Domain, size: int, rng: np.random.Generator
) -> Image.Image:
    """Render one image; consumer renders add clutter, lighting and an occluder."""
    consumer = domain is Domain.CONSUMER
    background = (
        tuple(int(v) for v in rng.integers(60, 200, 3)) if consumer else (236, 236, 236)
    )
    image = Image.new("RGB", (size, size), background)
    draw = ImageDraw.Draw(image)
    if consumer:
        for _ in range(6):
            x0, y0 = (int(v) for v in rng.integers(0, size, 2))
            x1 = x0 + int(rng.integers(2, size // 3))
            y1 = y0 + int(rng.integers(2, size // 3))
            clutter = tuple(int(v) for v in rng.integers(0, 256, 3))
            draw.rectangle((x0, y0, x1, y1), fill=clutter)
    margin = size // 8
    jitter = max(1, size // (16 if consumer else 32))
    dx, dy = (int(v) for v in rng.integers(-jitter, jitter + 1, 2))
    box = (margin + dx, margin + dy, size - margin + dx, size - margin + dy)
    _draw_garment(draw, pattern, box)
    if consumer:
        image = ImageEnhance.Brightness(image).enhance(float(rng.uniform(0.7, 1.3)))
        draw = ImageDraw.Draw(image)
        side = size // 4
        x0, y0 = (int(v) for v in rng.integers(0, size - side, 2))
        draw.rectangle((x0, y0, x0 + side, y0 + side), fill=(128, 128, 128))
    return image


def generate_synthetic_dataset(
    out_dir: Path | str,
    num_pids: int,
    imgs_per_domain: int,
    image_size: int = 64,
    seed: int = 0,
    holdout_pids: int = 0,
    schema: AttributeSchema | None = None,
) -> SyntheticDataset:
    """
    Render a dataset and write its manifest.

    The last `holdout_pids` identities become query (consumer) and gallery (shop)
    records; all others are training records.
    """
    if num_pids < 2:
        raise ConfigurationError(
            f"Metric learning needs at least 2 pids, got {num_pids}"
        )
    if imgs_per_domain < 1:
        raise ConfigurationError("imgs_per_domain must be at least 1")
    if image_size < 16:
        raise ConfigurationError(f"image_size must be at least 16, got {image_size}")
    if not 0 <= holdout_pids < num_pids:
        raise ConfigurationError(f"holdout_pids must be in [0, {num_pids})")
    schema = schema or AttributeSchema()
    root = Path(out_dir)
    (root / IMAGE_DIR).mkdir(parents=True, exist_ok=True)

    records: list[ImageRecord] = []
    for pid in range(num_pids):
        pattern = GarmentPattern.for_pid(pid, num_pids, seed)
        attributes = pattern.attributes(schema)
        held_out = pid >= num_pids - holdout_pids
        for domain_index, domain in enumerate((Domain.CONSUMER, Domain.SHOP)):
            if held_out:
                split = Split.QUERY if domain is Domain.CONSUMER else Split.GALLERY
            else:
                split = Split.TRAIN
            for i in range(imgs_per_domain):
                rng = np.random.default_rng(
                    np.random.SeedSequence([seed, pid, domain_index, i])
                )
                relative = f"{IMAGE_DIR}/{pid:04d}_{domain.value}_{i}.png"
                image = render(pattern, domain, image_size, rng)
                image.save(root / relative, format="PNG")
                records.append(
                    ImageRecord(
                        image_path=relative,
                        pid=pid,
                        domain=domain,
                        split=split,
                        attributes=attributes,
                    )
                )

    manifest = root / MANIFEST_NAME
    write_manifest(records, manifest)
    _LOGGER.info(
        "Generated %d images for %d pids in %s", len(records), num_pids, root
    )
    return SyntheticDataset(root=root, manifest=manifest, records=records)
