from .ops import (
    ConvSpec,
    conv3d_backward,
    conv3d_forward,
    dense,
    dense_backward,
    group_norm,
    group_norm_backward,
    leaky_relu,
    leaky_relu_backward,
    sigmoid,
    sigmoid_backward,
    trilinear_upsample2x,
    trilinear_upsample2x_backward,
)
from .optim import AdamState, adam_step
from .tensor import MemoryTracker, Tensor, memory_tracking, track

__all__ = [
    "AdamState",
    "ConvSpec",
    "MemoryTracker",
    "Tensor",
    "adam_step",
    "conv3d_backward",
    "conv3d_forward",
    "dense",
    "dense_backward",
    "group_norm",
    "group_norm_backward",
    "leaky_relu",
    "leaky_relu_backward",
    "memory_tracking",
    "sigmoid",
    "sigmoid_backward",
    "track",
    "trilinear_upsample2x",
    "trilinear_upsample2x_backward",
]
