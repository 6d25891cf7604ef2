from .tensor import Tensor, ShapeError, no_grad
from .layers import (
    BatchNorm,
    Embed,
    FPModule,
    Head,
    LABlock,
    Linear,
    Module,
    SetAbstraction,
    SharedMLP,
    classification_head,
    feature_propagation,
    la_block,
    segmentation_head,
    set_abstraction,
)

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "BatchNorm",
    "Embed",
    "FPModule",
    "Head",
    "LABlock",
    "Linear",
    "Module",
    "SetAbstraction",
    "SharedMLP",
    "classification_head",
    "feature_propagation",
    "la_block",
    "segmentation_head",
    "set_abstraction",
]
