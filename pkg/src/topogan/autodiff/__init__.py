"""Minimal reverse-mode differentiation core on numpy arrays."""
from . import functional
from .functional import (
    ShapeError,
    activation,
    batchnorm2d,
    binary_cross_entropy,
    concat,
    conv2d,
    dense,
    loss,
    softmax_cross_entropy,
    transposed_conv2d,
)
from .gradcheck import grad_check
from .layers import (
    Activation,
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    Dense,
    Flatten,
    GlobalAvgPool,
    Module,
    Reshape,
    Sequential,
)
from .optim import Adam, AdamState, adam_step
from .serialize import load_weights, save_weights
from .tensor import Parameter, Tensor, no_grad

__all__ = [
    "Activation",
    "Adam",
    "AdamState",
    "BatchNorm2d",
    "Conv2d",
    "ConvTranspose2d",
    "Dense",
    "Flatten",
    "GlobalAvgPool",
    "Module",
    "Parameter",
    "Reshape",
    "Sequential",
    "ShapeError",
    "Tensor",
    "activation",
    "adam_step",
    "batchnorm2d",
    "binary_cross_entropy",
    "concat",
    "conv2d",
    "dense",
    "functional",
    "grad_check",
    "load_weights",
    "loss",
    "no_grad",
    "save_weights",
    "softmax_cross_entropy",
    "transposed_conv2d",
]
