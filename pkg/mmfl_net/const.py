"""Constants for the MMFL retrieval package."""

from .network.const import BRANCH_ORDER, Branch, NormMode, Orientation, StrEnum

PACKAGE = "mmfl_net"


class Domain(StrEnum):
    """Image domain of a record."""

    CONSUMER = "consumer"
    SHOP = "shop"


class Split(StrEnum):
    """Dataset split of a record."""

    TRAIN = "train"
    QUERY = "query"
    GALLERY = "gallery"


class Provenance(StrEnum):
    """Layer a resolved configuration value came from."""

    DEFAULT = "default"
    PRESET = "preset"
    FILE = "file"
    ENV = "env"
    OVERRIDE = "override"


# Upper-wear attribute types and their mutually exclusive values.
DEFAULT_ATTRIBUTE_TYPES: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("Slv-Len", ("Short Sleeves", "Sleeveless", "Half Sleeves", "Long Sleeves")),
    ("Collar", ("Crewneck", "Polo Collar", "Stand Collar", "V-neck")),
    (
        "Fabric",
        ("Cotton", "Chiffon", "Blended Yarn", "Jeans Cloth", "Lace", "Hemp"),
    ),
    ("Fitness", ("Wide/Loose", "Slim Fit", "Rectangle-shaped", "Hourglass-shaped")),
)

# Attribute target used when a record carries no label for a type.
MISSING_ATTRIBUTE = -1

# Loss weights
DEFAULT_GAMMA_TRIPLET = 1.5
DEFAULT_BETA_CENTER = 0.0005
DEFAULT_MARGIN = 0.3
DEFAULT_SMOOTHING = 0.1

# Optimization
DEFAULT_EPOCHS = 120
DEFAULT_LR = 1e-4
DEFAULT_BETAS = (0.9, 0.999)
DEFAULT_ADAM_EPS = 1e-8
DEFAULT_WEIGHT_DECAY = 5e-4
DEFAULT_CENTER_LR = 0.5
DEFAULT_CENTER_MOMENTUM = 0.9
DEFAULT_MILESTONES = (50, 100)
DEFAULT_LR_DECAY = 0.1
DEFAULT_EVAL_PERIOD = 10

# Sampling
DEFAULT_P = 3
DEFAULT_K = 4
DEFAULT_IMAGE_SIZE = 320
DEFAULT_MIXUP_ALPHA = 0.2

# Retrieval
DEFAULT_RERANK_K1 = 20
DEFAULT_RERANK_K2 = 6
DEFAULT_RERANK_LAMBDA = 0.3
DEFAULT_PROBE_CLUSTERS = 3
DEFAULT_KMEANS_MAX_ITER = 100
REPORTED_RANKS = (1, 10, 20, 50)

# Persistence
STORE_MAGIC = b"MMFLEMB1"
STORE_META_SUFFIX = ".meta.jsonl"
CHECKPOINT_FORMAT_VERSION = 1
CONFIG_SNAPSHOT_NAME = "config.json"
HISTORY_NAME = "history.json"
TRAIN_LOG_NAME = "train.log.jsonl"
LAST_CHECKPOINT_NAME = "last.pt"
BEST_CHECKPOINT_NAME = "best.pt"

ENV_SEED = "MMFL_SEED"

__all__ = [
    "BRANCH_ORDER",
    "BEST_CHECKPOINT_NAME",
    "CHECKPOINT_FORMAT_VERSION",
    "CONFIG_SNAPSHOT_NAME",
    "DEFAULT_ADAM_EPS",
    "DEFAULT_ATTRIBUTE_TYPES",
    "DEFAULT_BETAS",
    "DEFAULT_BETA_CENTER",
    "DEFAULT_CENTER_LR",
    "DEFAULT_CENTER_MOMENTUM",
    "DEFAULT_EPOCHS",
    "DEFAULT_EVAL_PERIOD",
    "DEFAULT_GAMMA_TRIPLET",
    "DEFAULT_IMAGE_SIZE",
    "DEFAULT_K",
    "DEFAULT_KMEANS_MAX_ITER",
    "DEFAULT_LR",
    "DEFAULT_LR_DECAY",
    "DEFAULT_MARGIN",
    "DEFAULT_MILESTONES",
    "DEFAULT_MIXUP_ALPHA",
    "DEFAULT_P",
    "DEFAULT_PROBE_CLUSTERS",
    "DEFAULT_RERANK_K1",
    "DEFAULT_RERANK_K2",
    "DEFAULT_RERANK_LAMBDA",
    "DEFAULT_SMOOTHING",
    "DEFAULT_WEIGHT_DECAY",
    "ENV_SEED",
    "HISTORY_NAME",
    "LAST_CHECKPOINT_NAME",
    "MISSING_ATTRIBUTE",
    "PACKAGE",
    "REPORTED_RANKS",
    "STORE_MAGIC",
    "STORE_META_SUFFIX",
    "TRAIN_LOG_NAME",
    "Branch",
    "Domain",
    "NormMode",
    "Orientation",
    "Provenance",
    "Split",
]
