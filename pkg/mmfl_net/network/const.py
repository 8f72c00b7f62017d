"""Constants for the MMFL network."""

import sys

if sys.version_info >= (3, 11):
    from enum import StrEnum
else:  # pragma: no cover - backport of the 3.11 stdlib class
    from enum import Enum

    class StrEnum(str, Enum):
        """Enum whose members are also (and must be) strings."""

        def __str__(self) -> str:
            return str.__str__(self)

        def __format__(self, format_spec: str) -> str:
            return str.__format__(str(self), format_spec)

        @staticmethod
        def _generate_next_value_(
            name: str, start: int, count: int, last_values: list[str]
        ) -> str:
            return name.lower()

STAGE_STRIDES = (4, 8, 16, 32)
INPUT_MULTIPLE = 32

# Weighted fusion stabilizer for the bidirectional pyramid nodes.
FUSION_EPSILON = 1e-4
DILATION_RATES = (3, 5, 7)

# Adaptive ECA kernel rule k = odd(|log2(C) / gamma + b / gamma|).
ECA_GAMMA = 2
ECA_BETA = 1

NUM_PARTS = 2


class NormMode(StrEnum):
    """Normalization layout of the backbone."""

    BATCH = "batch"
    INSTANCE_BATCH_MIX = "instance_batch_mix"


class Orientation(StrEnum):
    """Partition axis of a part branch."""

    HORIZONTAL = "horizontal"
    VERTICAL = "vertical"


class Branch(StrEnum):
    """Feature branches, in embedding concatenation order."""

    GLOBAL = "global"
    HORIZONTAL = "horizontal"
    VERTICAL = "vertical"
    LOCAL = "local"


BRANCH_ORDER = (Branch.GLOBAL, Branch.HORIZONTAL, Branch.VERTICAL, Branch.LOCAL)
