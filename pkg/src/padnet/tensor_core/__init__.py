"""Small numpy tensor engine with reverse-mode autodiff and Adam."""
from . import functional
from .functional import (
    batch_norm,
    concat,
    conv2d,
    conv_transpose2d,
    global_max_pool2d,
    linear,
    max_pool2d,
    mse_loss,
    relu,
    upsample_bilinear,
)
from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, Linear, Module, Parameter
from .optim import Adam, AdamState, adam_step
from .tensor import (
    Tensor,
    as_tensor,
    backward,
    get_default_dtype,
    no_grad,
    precision,
    set_default_dtype,
)

__all__ = [
    "Adam", "AdamState", "BatchNorm2d", "Conv2d", "ConvTranspose2d", "Linear", "Module",
    "Parameter", "Tensor", "adam_step", "as_tensor", "backward", "batch_norm", "concat",
    "conv2d", "conv_transpose2d", "functional", "get_default_dtype", "global_max_pool2d",
    "linear", "max_pool2d", "mse_loss", "no_grad", "precision", "relu", "set_default_dtype",
    "upsample_bilinear",
]
