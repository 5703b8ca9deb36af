from .autograd import Var
from .layers import (
    Activation,
    Conv3d,
    GroupNorm,
    Identity,
    LayerChain,
    Linear,
    Upsample,
    parameter,
)
from .optim import AdamState, adam_step

__all__ = [
    "Activation", "AdamState", "Conv3d", "GroupNorm", "Identity", "LayerChain",
    "Linear", "Upsample", "Var", "adam_step", "parameter",
]
