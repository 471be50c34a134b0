"""Small numpy neural-network engine with analytic backward passes."""

from .graph import ModelGraph
from .layers import (
    INFER,
    TRAIN,
    ClassReadout,
    ClassToken,
    Conv2D,
    Dense,
    GELU,
    GlobalAvgPool,
    Layer,
    LayerNorm,
    MaxPool2,
    MultiHeadSelfAttention,
    PatchEmbed,
    PositionalEmbed,
    ReLU,
    Residual,
    Softmax,
    backward,
    forward,
    softmax,
)
from .losses import cross_entropy_loss
from .optim import AdamState, adam_step

__all__ = [
    "INFER", "TRAIN", "ModelGraph", "Layer", "ClassReadout", "ClassToken", "Conv2D",
    "Dense", "GELU", "GlobalAvgPool", "LayerNorm", "MaxPool2", "MultiHeadSelfAttention",
    "PatchEmbed", "PositionalEmbed", "ReLU", "Residual", "Softmax", "backward", "forward",
    "softmax", "cross_entropy_loss", "AdamState", "adam_step",
]
