from .gradcheck import grad_check
from .ops import (
    ShapeError,
    add,
    concat,
    conv3d,
    conv_output_extent,
    div,
    exp,
    gelu,
    layer_norm,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    multi_head_attention,
    neg,
    pair_cosine,
    power,
    reshape,
    scaled_attention,
    softmax,
    sparse_matmul,
    sub,
    transpose,
    trilinear_upsample,
)
from .ops import sum as reduce_sum
from .optim import Parameter, adamw_step
from .tensor import Tensor, backward, grad_enabled, no_grad, tape

__all__ = [
    "Parameter", "ShapeError", "Tensor", "adamw_step", "add", "backward", "concat", "conv3d",
    "conv_output_extent", "div", "exp", "gelu", "grad_check", "grad_enabled", "layer_norm",
    "linear", "log", "log_softmax", "matmul", "mean", "mul", "multi_head_attention", "neg",
    "no_grad", "pair_cosine", "power", "reduce_sum", "reshape", "scaled_attention", "softmax",
    "sparse_matmul", "sub", "tape", "transpose", "trilinear_upsample",
]
