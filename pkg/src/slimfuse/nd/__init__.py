"""Minimal numeric substrate: arrays, autodiff ops, gradient checking."""

from .tensor import (
    Parameter,
    ShapeError,
    Tensor,
    absolute,
    arctan,
    as_tensor,
    clip,
    concatenate,
    default_dtype,
    exp,
    grad_enabled,
    log,
    matmul,
    max_,
    maximum,
    mean,
    minimum,
    no_grad,
    power,
    precision,
    reshape,
    set_default_dtype,
    sqrt,
    stack,
    sum_,
    take,
    transpose,
    where,
)
from .functional import (
    GELU_MIN,
    NEG_MASK_VALUE,
    adaptive_avg_pool2d,
    batch_norm,
    bce_with_logits,
    channel_affine,
    conv2d,
    elu,
    embedding,
    gelu,
    linear,
    log_softmax,
    relu,
    resize_nearest2d,
    sigmoid,
    softmax,
    softplus,
    upsample_bilinear2d,
    upsample_nearest2d,
)
from .gradcheck import GradCheckReport, grad_check, grad_check_detail, grad_check_module
from .module import BatchNorm2d, Conv2d, ConvBnRelu, Embedding, Linear, Module, kaiming_uniform
from .serialize import (
    FormatError,
    load_array,
    load_state,
    read_array,
    save_array,
    save_state,
    write_array,
)

__all__ = [
    "Tensor", "Parameter", "ShapeError", "no_grad", "precision",
    "set_default_dtype", "default_dtype", "grad_check", "grad_check_detail",
    "Module", "Linear", "Conv2d", "BatchNorm2d", "ConvBnRelu", "Embedding",
]
