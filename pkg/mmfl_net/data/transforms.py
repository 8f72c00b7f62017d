"""Image preprocessing and seeded augmentation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

import numpy as np
import torch
import torchvision.transforms.functional as TF
from PIL import Image

from ..exceptions import ArgumentError, EmbeddingStoreError

if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping, Sequence
    from pathlib import Path

    from .manifest import BBox, ImageRecord

_LOGGER = logging.getLogger(__name__)

Fill = tuple[int, int, int]

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
DEFAULT_FILL: Fill = (124, 116, 104)


@dataclass(frozen=True)
class AugmentConfig:
    """Per-transform probabilities and magnitudes."""

    flip_prob: float = 0.5
    rotate_prob: float = 0.5
    rotate_degrees: float = 10.0
    crop_prob: float = 0.5
    crop_scale: float = 0.9
    jitter_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.02

    @classmethod
    def from_config(cls, section: Mapping[str, Any]) -> AugmentConfig:
        """Build from the `data.augment` config section."""
        return cls(**{key: float(value) for key, value in section.items()})

    @classmethod
    def disabled(cls) -> AugmentConfig:
        """Return a config that applies no transform."""
        return cls(flip_prob=0.0, rotate_prob=0.0, crop_prob=0.0, jitter_prob=0.0)


def sample_seed(seed: int, epoch: int, index: int) -> int:
    """Derive the augmentation seed of one sample from (seed, epoch, index)."""
    state = np.random.SeedSequence([seed, epoch, index]).generate_state(1)
    return int(state[0])


def load_image(path: Path) -> Image.Image:
    """Open an image file as RGB."""
    with Image.open(path) as image:
        return image.convert("RGB")


def crop_bbox(image: Image.Image, bbox: BBox | None) -> Image.Image:
    """Crop an (x, y, w, h) box, clipped to the image."""
    if bbox is None:
        return image
    x, y, w, h = bbox
    left, top = min(x, image.width - 1), min(y, image.height - 1)
    right, bottom = min(x + w, image.width), min(y + h, image.height)
    return image.crop((left, top, max(right, left + 1), max(bottom, top + 1)))


def pad_resize(image: Image.Image, size: int, fill: Fill = DEFAULT_FILL) -> Image.Image:
    """Scale the longest edge to `size` and pad the short edge symmetrically."""
    if size <= 0:
        raise ArgumentError(f"Target size must be positive, got {size}")
    width, height = image.size
    scale = size / max(width, height)
    new_width = max(1, round(width * scale))
    new_height = max(1, round(height * scale))
    if (new_width, new_height) != (width, height):
        image = image.resize((new_width, new_height), Image.Resampling.BILINEAR)
    if (new_width, new_height) == (size, size):
        return image.copy()
    canvas = Image.new("RGB", (size, size), fill)
    canvas.paste(image, ((size - new_width) // 2, (size - new_height) // 2))
    return canvas


def _uniform(generator: torch.Generator, low: float, high: float) -> float:
    """Draw one float from U[low, high)."""
    return low + (high - low) * float(torch.rand(1, generator=generator))


def augment(
    image: Image.Image, config: AugmentConfig, seed: int, fill: Fill = DEFAULT_FILL
) -> Image.Image:
    """
    Apply flip, rotation, center crop and color jitter in that order.

    Every random draw is made whether or not its transform fires, so the
    parameters of one transform do not depend on the gates of another.
    """
    generator = torch.Generator().manual_seed(seed)
    gates = torch.rand(4, generator=generator).tolist()
    angle = _uniform(generator, -config.rotate_degrees, config.rotate_degrees)
    scale = _uniform(generator, min(config.crop_scale, 1.0), 1.0)
    brightness = _uniform(
        generator, max(0.0, 1 - config.brightness), 1 + config.brightness
    )
    contrast = _uniform(generator, max(0.0, 1 - config.contrast), 1 + config.contrast)
    saturation = _uniform(
        generator, max(0.0, 1 - config.saturation), 1 + config.saturation
    )
    hue = _uniform(generator, -config.hue, config.hue)

    if gates[0] < config.flip_prob:
        image = TF.hflip(image)
    if gates[1] < config.rotate_prob and angle != 0.0:
        image = TF.rotate(image, angle, fill=list(fill))
    if gates[2] < config.crop_prob and scale < 1.0:
        crop = [max(1, round(image.height * scale)), max(1, round(image.width * scale))]
        image = TF.center_crop(image, crop)
    if gates[3] < config.jitter_prob:
        if brightness != 1.0:
            image = TF.adjust_brightness(image, brightness)
        if contrast != 1.0:
            image = TF.adjust_contrast(image, contrast)
        if saturation != 1.0:
            image = TF.adjust_saturation(image, saturation)
        if hue != 0.0:
            image = TF.adjust_hue(image, hue)
    return image


def to_tensor(image: Image.Image) -> torch.Tensor:
    """Convert to a normalized float tensor of shape (3, H, W)."""
    return TF.normalize(TF.to_tensor(image), IMAGENET_MEAN, IMAGENET_STD)


class RecordTransform:
    """Turn a record into a network input tensor."""

    def __init__(
        self,
        image_root: Path,
        size: int,
        fill: Fill,
        augment_config: AugmentConfig | None = None,
    ) -> None:
        """Initialize the transform; no augmentation when `augment_config` is None."""
        self.image_root = image_root
        self.size = size
        self.fill = fill
        self.augment_config = augment_config

    def __call__(self, record: ImageRecord, seed: int = 0) -> torch.Tensor:
        """Crop, optionally augment, then pad-resize and normalize one record."""
        image = crop_bbox(load_image(record.resolve(self.image_root)), record.bbox)
        if self.augment_config is not None:
            image = augment(image, self.augment_config, seed, self.fill)
        return to_tensor(pad_resize(image, self.size, self.fill))

    def image(self, image: Image.Image) -> torch.Tensor:
        """Preprocess a raw image without augmentation."""
        return to_tensor(pad_resize(image.convert("RGB"), self.size, self.fill))


def estimate_channel_mean(records: Iterable[ImageRecord], image_root: Path) -> Fill:
    """Return the per-channel mean pixel value over all record crops."""
    total = np.zeros(3, dtype=np.float64)
    count = 0
    for record in records:
        pixels = np.asarray(
            crop_bbox(load_image(record.resolve(image_root)), record.bbox),
            dtype=np.float64,
        ).reshape(-1, 3)
        total += pixels.sum(axis=0)
        count += pixels.shape[0]
    if count == 0:
        _LOGGER.warning("No images to estimate the fill from, using %s", DEFAULT_FILL)
        return DEFAULT_FILL
    mean = np.rint(total / count).astype(int)
    return int(mean[0]), int(mean[1]), int(mean[2])


def resolve_fill(
    fill: str | Sequence[int], records: Iterable[ImageRecord], image_root: Path
) -> Fill:
    """Resolve the `data.fill` config value to an RGB triple."""
    if fill == "auto":
        return estimate_channel_mean(records, image_root)
    red, green, blue = (int(value) for value in fill)
    return red, green, blue


def missing_images(records: Iterable[ImageRecord], image_root: Path) -> list[str]:
    """Return the resolved paths of records whose image file does not exist."""
    return [
        str(path)
        for path in (record.resolve(image_root) for record in records)
        if not path.is_file()
    ]


def require_images(records: Iterable[ImageRecord], image_root: Path) -> None:
    """Raise listing every missing image file."""
    missing = missing_images(records, image_root)
    if missing:
        raise EmbeddingStoreError(f"Missing image files: {', '.join(missing)}")
