"""Dataset manifests, preprocessing and batch sampling."""

from .manifest import (
    AttributeSchema,
    ImageRecord,
    class_mapping,
    load_manifest,
    select,
    write_manifest,
)
from .mixup import MixedBatch, mixup
from .sampler import (
    BatchCollator,
    PKBatchSampler,
    RecordDataset,
    SampleKey,
    TripletBatch,
)
from .synthetic import generate_synthetic_dataset
from .transforms import (
    AugmentConfig,
    RecordTransform,
    augment,
    estimate_channel_mean,
    pad_resize,
    resolve_fill,
)

__all__ = [
    "AttributeSchema",
    "AugmentConfig",
    "BatchCollator",
    "ImageRecord",
    "MixedBatch",
    "PKBatchSampler",
    "RecordDataset",
    "RecordTransform",
    "SampleKey",
    "TripletBatch",
    "augment",
    "class_mapping",
    "estimate_channel_mean",
    "generate_synthetic_dataset",
    "load_manifest",
    "mixup",
    "pad_resize",
    "resolve_fill",
    "select",
    "write_manifest",
]
