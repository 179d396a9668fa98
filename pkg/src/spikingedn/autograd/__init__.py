"""Minimal dense autograd engine: tensors, primitives, layers and optimiser."""

from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    precision,
    set_default_dtype,
    topological_order,
)
from .functional import (
    batch_norm,
    concat,
    conv2d,
    cross_entropy,
    global_avg_pool,
    softmax,
    upsample_average,
    upsample_nearest,
)
from .nn import BatchNorm2d, Conv2d, ConvBN, Module, Parameter, StateError, fold_bn_into_conv
from .optim import Adam, poly_lr
from .gradcheck import gradcheck, numerical_grad

__all__ = [
    "Adam", "BatchNorm2d", "Conv2d", "ConvBN", "Module", "Parameter", "ShapeError", "StateError",
    "Tensor", "as_tensor", "batch_norm", "concat", "conv2d", "cross_entropy", "fold_bn_into_conv",
    "get_default_dtype", "global_avg_pool", "gradcheck", "is_grad_enabled", "no_grad",
    "numerical_grad", "poly_lr", "precision", "set_default_dtype", "softmax", "topological_order",
    "upsample_average", "upsample_nearest",
]
