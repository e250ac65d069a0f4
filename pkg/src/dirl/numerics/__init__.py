from .gradcheck import GradCheckReport, ParamCheck, grad_check
from .tensor import (
    Tensor,
    layer_norm,
    log_softmax_rows,
    matmul,
    parameter,
    scaled_dot_attention,
    softmax_rows,
    zero_grads,
)

__all__ = [
    "GradCheckReport",
    "ParamCheck",
    "Tensor",
    "grad_check",
    "layer_norm",
    "log_softmax_rows",
    "matmul",
    "parameter",
    "scaled_dot_attention",
    "softmax_rows",
    "zero_grads",
]
