"""Network modules for consumer-to-shop retrieval."""

from .backbone import Backbone, BackboneConfig, StagePyramid
from .branches import (
    BranchOutput,
    EfficientChannelAttention,
    EmbeddingBundle,
    FeatureBranches,
    GlobalBranch,
    LocalAttentionSelection,
    PartBranch,
    select_top_k,
)
from .const import BRANCH_ORDER, Branch, NormMode, Orientation
from .jarn import AttributeHead, HeadOutput, IdentityHead, JointHead, inference_embed
from .model import MMFLNet, ModelConfig, ModelOutput, build_model
from .sffp import (
    BiFPN,
    DenseASPP,
    FeatureFusion,
    FusedFeatureMaps,
    FusionNode,
    GlobalContext,
    PyramidLevels,
    ResolutionFusion,
)

__all__ = [
    "BRANCH_ORDER",
    "AttributeHead",
    "Backbone",
    "BackboneConfig",
    "BiFPN",
    "Branch",
    "BranchOutput",
    "DenseASPP",
    "EfficientChannelAttention",
    "EmbeddingBundle",
    "FeatureBranches",
    "FeatureFusion",
    "FusedFeatureMaps",
    "FusionNode",
    "GlobalBranch",
    "GlobalContext",
    "HeadOutput",
    "IdentityHead",
    "JointHead",
    "LocalAttentionSelection",
    "MMFLNet",
    "ModelConfig",
    "ModelOutput",
    "NormMode",
    "Orientation",
    "PartBranch",
    "PyramidLevels",
    "ResolutionFusion",
    "StagePyramid",
    "build_model",
    "inference_embed",
    "select_top_k",
]
