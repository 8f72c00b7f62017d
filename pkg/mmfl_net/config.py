"""Layered configuration for the MMFL retrieval package."""

from __future__ import annotations

import copy
import json
import logging
import os
from pathlib import Path
from typing import TYPE_CHECKING, Any

import voluptuous as vol

from .const import (
    BRANCH_ORDER,
    DEFAULT_ADAM_EPS,
    DEFAULT_ATTRIBUTE_TYPES,
    DEFAULT_BETA_CENTER,
    DEFAULT_BETAS,
    DEFAULT_CENTER_LR,
    DEFAULT_CENTER_MOMENTUM,
    DEFAULT_EPOCHS,
    DEFAULT_EVAL_PERIOD,
    DEFAULT_GAMMA_TRIPLET,
    DEFAULT_IMAGE_SIZE,
    DEFAULT_K,
    DEFAULT_LR,
    DEFAULT_LR_DECAY,
    DEFAULT_MARGIN,
    DEFAULT_MILESTONES,
    DEFAULT_MIXUP_ALPHA,
    DEFAULT_P,
    DEFAULT_PROBE_CLUSTERS,
    DEFAULT_RERANK_K1,
    DEFAULT_RERANK_K2,
    DEFAULT_RERANK_LAMBDA,
    DEFAULT_SMOOTHING,
    DEFAULT_WEIGHT_DECAY,
    ENV_SEED,
    Branch,
    NormMode,
    Provenance,
)
from .exceptions import ConfigurationError

if TYPE_CHECKING:
    from collections.abc import Iterator, Mapping, Sequence

_LOGGER = logging.getLogger(__name__)

DEFAULTS: dict[str, Any] = {
    "preset": "full",
    "seed": 0,
    "device": "cpu",
    "model": {
        "stem_channels": 64,
        "stage_channels": [256, 512, 1024, 2048],
        "blocks_per_stage": [3, 4, 6, 3],
        "norm_mode": NormMode.INSTANCE_BATCH_MIX.value,
        "pyramid_width": 256,
        "fused_width": 512,
        "bifpn_repeats": 2,
        "gcnet_reduction": 16,
        "embed_dim": 256,
        "part_dim": 128,
        "lras_channels": 256,
        "lras_top_k": 4,
        "pid_hidden": 768,
        "attribute_hidden": 256,
        "branches": [branch.value for branch in BRANCH_ORDER],
    },
    "data": {
        "manifest": "",
        "image_root": "",
        "image_size": DEFAULT_IMAGE_SIZE,
        "p": DEFAULT_P,
        "k": DEFAULT_K,
        "num_workers": 0,
        "fill": "auto",
        "attributes": [
            [name, list(values)] for name, values in DEFAULT_ATTRIBUTE_TYPES
        ],
        "augment": {
            "flip_prob": 0.5,
            "rotate_prob": 0.5,
            "rotate_degrees": 10.0,
            "crop_prob": 0.5,
            "crop_scale": 0.9,
            "jitter_prob": 0.5,
            "brightness": 0.2,
            "contrast": 0.2,
            "saturation": 0.2,
            "hue": 0.02,
        },
        "mixup": {"enabled": False, "alpha": DEFAULT_MIXUP_ALPHA},
    },
    "loss": {
        "gamma_triplet": DEFAULT_GAMMA_TRIPLET,
        "beta_center": DEFAULT_BETA_CENTER,
        "margin": DEFAULT_MARGIN,
        "smoothing": DEFAULT_SMOOTHING,
    },
    "optim": {
        "epochs": DEFAULT_EPOCHS,
        "lr": DEFAULT_LR,
        "betas": list(DEFAULT_BETAS),
        "eps": DEFAULT_ADAM_EPS,
        "weight_decay": DEFAULT_WEIGHT_DECAY,
        "center_lr": DEFAULT_CENTER_LR,
        "center_momentum": DEFAULT_CENTER_MOMENTUM,
        "milestones": list(DEFAULT_MILESTONES),
        "lr_decay": DEFAULT_LR_DECAY,
    },
    "eval": {
        "period": DEFAULT_EVAL_PERIOD,
        "batch_size": 32,
        "rerank": False,
        "k1": DEFAULT_RERANK_K1,
        "k2": DEFAULT_RERANK_K2,
        "lambda": DEFAULT_RERANK_LAMBDA,
        "n_clusters": 8,
        "probe": DEFAULT_PROBE_CLUSTERS,
    },
}

PRESETS: dict[str, dict[str, Any]] = {
    "full": {},
    "tiny": {
        "model": {
            "stem_channels": 8,
            "stage_channels": [16, 32, 64, 128],
            "blocks_per_stage": [1, 1, 1, 1],
            "pyramid_width": 32,
            "fused_width": 64,
            "bifpn_repeats": 1,
            "gcnet_reduction": 4,
            "embed_dim": 32,
            "part_dim": 16,
            "lras_channels": 32,
            "lras_top_k": 2,
            "pid_hidden": 32,
            "attribute_hidden": 32,
        },
        "data": {"image_size": 64},
        "optim": {"epochs": 30, "lr": 1e-3, "milestones": [20]},
        "eval": {"period": 10, "n_clusters": 4, "k1": 6, "k2": 2},
    },
}


def strict_int(value: Any) -> int:
    """Accept an integer but not a boolean."""
    if isinstance(value, bool) or not isinstance(value, int):
        raise vol.Invalid(f"expected an integer, got {value!r}")
    return value


def multiple_of_32(value: int) -> int:
    """Accept sizes the five backbone strides divide."""
    if value % 32:
        raise vol.Invalid(f"must be a multiple of 32, got {value}")
    return value


_POSITIVE_INT = vol.All(strict_int, vol.Range(min=1))
_NON_NEGATIVE_INT = vol.All(strict_int, vol.Range(min=0))
_PROBABILITY = vol.All(vol.Coerce(float), vol.Range(min=0.0, max=1.0))
_NON_NEGATIVE = vol.All(vol.Coerce(float), vol.Range(min=0.0))
_POSITIVE = vol.All(vol.Coerce(float), vol.Range(min=0.0, min_included=False))
_CHANNEL = vol.All(strict_int, vol.Range(min=0, max=255))
_FOUR_INTS = vol.Schema(vol.All([_POSITIVE_INT], vol.Length(min=4, max=4)))


CONFIG_SCHEMA = vol.Schema(
    {
        vol.Required("preset"): vol.In(list(PRESETS)),
        vol.Required("seed"): _NON_NEGATIVE_INT,
        vol.Required("device"): str,
        vol.Required("model"): {
            vol.Required("stem_channels"): _POSITIVE_INT,
            vol.Required("stage_channels"): _FOUR_INTS,
            vol.Required("blocks_per_stage"): _FOUR_INTS,
            vol.Required("norm_mode"): vol.In([mode.value for mode in NormMode]),
            vol.Required("pyramid_width"): _POSITIVE_INT,
            vol.Required("fused_width"): _POSITIVE_INT,
            vol.Required("bifpn_repeats"): _POSITIVE_INT,
            vol.Required("gcnet_reduction"): _POSITIVE_INT,
            vol.Required("embed_dim"): _POSITIVE_INT,
            vol.Required("part_dim"): _POSITIVE_INT,
            vol.Required("lras_channels"): _POSITIVE_INT,
            vol.Required("lras_top_k"): _POSITIVE_INT,
            vol.Required("pid_hidden"): _POSITIVE_INT,
            vol.Required("attribute_hidden"): _POSITIVE_INT,
            vol.Required("branches"): vol.All(
                [vol.In([branch.value for branch in Branch])],
                vol.Length(min=1),
                vol.Unique(),
            ),
        },
        vol.Required("data"): {
            vol.Required("manifest"): str,
            vol.Required("image_root"): str,
            vol.Required("image_size"): vol.All(
                _POSITIVE_INT, vol.Range(min=32), multiple_of_32
            ),
            vol.Required("p"): _POSITIVE_INT,
            vol.Required("k"): _POSITIVE_INT,
            vol.Required("num_workers"): _NON_NEGATIVE_INT,
            vol.Required("fill"): vol.Any(
                "auto",
                vol.All([_CHANNEL], vol.Length(min=3, max=3)),
            ),
            vol.Required("attributes"): [
                vol.ExactSequence(
                    [str, vol.All([str], vol.Length(min=2), vol.Unique())]
                )
            ],
            vol.Required("augment"): {
                vol.Required("flip_prob"): _PROBABILITY,
                vol.Required("rotate_prob"): _PROBABILITY,
                vol.Required("rotate_degrees"): _NON_NEGATIVE,
                vol.Required("crop_prob"): _PROBABILITY,
                vol.Required("crop_scale"): _PROBABILITY,
                vol.Required("jitter_prob"): _PROBABILITY,
                vol.Required("brightness"): _NON_NEGATIVE,
                vol.Required("contrast"): _NON_NEGATIVE,
                vol.Required("saturation"): _NON_NEGATIVE,
                vol.Required("hue"): vol.All(
                    vol.Coerce(float), vol.Range(min=0.0, max=0.5)
                ),
            },
            vol.Required("mixup"): {
                vol.Required("enabled"): bool,
                vol.Required("alpha"): _POSITIVE,
            },
        },
        vol.Required("loss"): {
            vol.Required("gamma_triplet"): _NON_NEGATIVE,
            vol.Required("beta_center"): _NON_NEGATIVE,
            vol.Required("margin"): _NON_NEGATIVE,
            vol.Required("smoothing"): vol.All(
                vol.Coerce(float), vol.Range(min=0.0, max=1.0, max_included=False)
            ),
        },
        vol.Required("optim"): {
            vol.Required("epochs"): _NON_NEGATIVE_INT,
            vol.Required("lr"): _NON_NEGATIVE,
            vol.Required("betas"): vol.ExactSequence([_PROBABILITY, _PROBABILITY]),
            vol.Required("eps"): _NON_NEGATIVE,
            vol.Required("weight_decay"): _NON_NEGATIVE,
            vol.Required("center_lr"): _NON_NEGATIVE,
            vol.Required("center_momentum"): _PROBABILITY,
            vol.Required("milestones"): [_POSITIVE_INT],
            vol.Required("lr_decay"): _NON_NEGATIVE,
        },
        vol.Required("eval"): {
            vol.Required("period"): _POSITIVE_INT,
            vol.Required("batch_size"): _POSITIVE_INT,
            vol.Required("rerank"): bool,
            vol.Required("k1"): _POSITIVE_INT,
            vol.Required("k2"): _POSITIVE_INT,
            vol.Required("lambda"): _PROBABILITY,
            vol.Required("n_clusters"): _POSITIVE_INT,
            vol.Required("probe"): _POSITIVE_INT,
        },
    }
)


def _flatten(tree: Mapping[str, Any], prefix: str = "") -> Iterator[tuple[str, Any]]:
    """Yield (dotted key, leaf value) pairs; lists are leaves."""
    for key, value in tree.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            yield from _flatten(value, f"{dotted}.")
        else:
            yield dotted, value


def _merge(
    base: dict[str, Any],
    layer: Mapping[str, Any],
    provenance: dict[str, Provenance],
    source: Provenance,
    prefix: str = "",
) -> None:
    """Merge a layer into the base tree in place, rejecting unknown keys."""
    for key, value in layer.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigurationError(f"Unknown configuration key: {dotted}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(
                    f"Configuration key {dotted} expects a section, got {value!r}"
                )
            _merge(base[key], value, provenance, source, f"{dotted}.")
            continue
        if isinstance(value, dict):
            raise ConfigurationError(
                f"Configuration key {dotted} is a value, not a section"
            )
        base[key] = copy.deepcopy(value)
        provenance[dotted] = source


def _nest(dotted: str, value: Any) -> dict[str, Any]:
    """Build a nested single-key tree from a dotted path."""
    tree: dict[str, Any] = {}
    node = tree
    *parents, leaf = dotted.split(".")
    for part in parents:
        node = node.setdefault(part, {})
    node[leaf] = value
    return tree


def parse_override(override: str) -> tuple[str, Any]:
    """Parse a `dotted.key=value` override; values are JSON when they parse."""
    key, sep, raw = override.partition("=")
    if not sep or not key:
        raise ConfigurationError(f"Override {override!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


class Config:
    """A resolved, validated configuration tree with per-key provenance."""

    def __init__(self, data: dict[str, Any], provenance: dict[str, Provenance]) -> None:
        """Initialize the configuration."""
        self.data = data
        self._provenance = provenance

    def get(self, dotted: str) -> Any:
        """Return the value at a dotted path."""
        node: Any = self.data
        for part in dotted.split("."):
            if not isinstance(node, dict) or part not in node:
                raise ConfigurationError(f"Unknown configuration key: {dotted}")
            node = node[part]
        return node

    def section(self, name: str) -> dict[str, Any]:
        """Return a copy of a top-level section."""
        value = self.get(name)
        if not isinstance(value, dict):
            raise ConfigurationError(f"Configuration key {name} is not a section")
        return copy.deepcopy(value)

    def provenance(self, dotted: str) -> Provenance:
        """Return the layer a leaf value was resolved from."""
        self.get(dotted)
        return self._provenance.get(dotted, Provenance.DEFAULT)

    def with_overrides(self, overrides: Mapping[str, Any]) -> Config:
        """Return a new configuration with dotted overrides applied."""
        data = copy.deepcopy(self.data)
        provenance = dict(self._provenance)
        for dotted, value in overrides.items():
            _merge(data, _nest(dotted, value), provenance, Provenance.OVERRIDE)
        return Config(_validate(data), provenance)

    def snapshot(self) -> str:
        """Serialize to the canonical JSON snapshot stored with each run."""
        return json.dumps(self.data, indent=2, sort_keys=True)

    def write_snapshot(self, path: Path) -> None:
        """Write the canonical snapshot to a file."""
        path.write_text(self.snapshot() + "\n", encoding="utf-8")


def _validate(data: dict[str, Any]) -> dict[str, Any]:
    """Validate a merged tree against the schema."""
    try:
        validated: dict[str, Any] = CONFIG_SCHEMA(data)
    except vol.Invalid as err:
        path = ".".join(str(part) for part in err.path)
        raise ConfigurationError(
            f"Invalid configuration value at {path or '<root>'}: {err.error_message}"
        ) from err
    milestones = validated["optim"]["milestones"]
    if any(b <= a for a, b in zip(milestones, milestones[1:], strict=False)):
        raise ConfigurationError("optim.milestones must be strictly increasing")
    if validated["eval"]["k2"] >= validated["eval"]["k1"]:
        raise ConfigurationError("eval.k2 must be smaller than eval.k1")
    return validated


def load_config_file(path: Path | str) -> dict[str, Any]:
    """
    Read a JSON config file.

    A bare preset name that is not an existing file is accepted as shorthand for
    a file containing only that preset.
    """
    path = Path(path)
    if not path.exists():
        if str(path) in PRESETS:
            return {"preset": str(path)}
        raise ConfigurationError(f"Config file not found: {path}")
    try:
        layer = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ConfigurationError(
            f"Config file {path} is not valid JSON: {err}"
        ) from err
    if not isinstance(layer, dict):
        raise ConfigurationError(f"Config file {path} must contain a JSON object")
    return layer


def resolve_config(
    path: Path | str | None = None,
    overrides: Sequence[str] = (),
    env: Mapping[str, str] | None = None,
) -> Config:
    """Resolve defaults < preset < file < environment < overrides."""
    env = os.environ if env is None else env
    file_layer = load_config_file(path) if path is not None else {}
    override_layers = [_nest(*parse_override(item)) for item in overrides]

    preset = DEFAULTS["preset"]
    for layer in [file_layer, *override_layers]:
        preset = layer.get("preset", preset)
    if preset not in PRESETS:
        raise ConfigurationError(f"Unknown preset: {preset}")

    data = copy.deepcopy(DEFAULTS)
    provenance: dict[str, Provenance] = {}
    _merge(data, PRESETS[preset], provenance, Provenance.PRESET)
    _merge(data, file_layer, provenance, Provenance.FILE)
    if ENV_SEED in env:
        try:
            seed = int(env[ENV_SEED])
        except ValueError as err:
            raise ConfigurationError(f"{ENV_SEED} must be an integer") from err
        _merge(data, {"seed": seed}, provenance, Provenance.ENV)
    for layer in override_layers:
        _merge(data, layer, provenance, Provenance.OVERRIDE)

    config = Config(_validate(data), provenance)
    _LOGGER.debug(
        "Resolved configuration (preset %s, %d non-default keys)",
        preset,
        len(provenance),
    )
    return config


def config_from_snapshot(snapshot: Mapping[str, Any]) -> Config:
    """Rebuild a configuration from a stored snapshot."""
    data = copy.deepcopy(DEFAULTS)
    provenance: dict[str, Provenance] = {}
    _merge(data, snapshot, provenance, Provenance.FILE)
    return Config(_validate(data), provenance)


def leaf_keys() -> list[str]:
    """Return every dotted leaf key of the configuration tree."""
    return [key for key, _ in _flatten(DEFAULTS)]
