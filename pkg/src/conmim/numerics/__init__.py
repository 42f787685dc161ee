from .tensor import (
    OPS,
    Gradients,
    NumericsError,
    ShapeError,
    Tape,
    Tensor,
    active_tape,
    backward_accumulate,
    default_dtype,
    default_dtype_as,
    forward_eval,
    is_strict,
    no_tape,
    set_default_dtype,
    set_strict,
    strict_mode,
)
from . import ops
from .ops import (
    concat,
    cross_entropy,
    exp,
    gelu,
    l2_normalize,
    layer_norm,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    reshape,
    scatter,
    softmax,
    stop_gradient,
    take,
    transpose,
    where,
)
from .gradcheck import analytic_grad, grad_check, numeric_grad

__all__ = [
    "OPS",
    "Gradients",
    "NumericsError",
    "ShapeError",
    "Tape",
    "Tensor",
    "active_tape",
    "analytic_grad",
    "backward_accumulate",
    "concat",
    "cross_entropy",
    "default_dtype",
    "default_dtype_as",
    "exp",
    "forward_eval",
    "gelu",
    "grad_check",
    "is_strict",
    "l2_normalize",
    "layer_norm",
    "linear",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "no_tape",
    "numeric_grad",
    "ops",
    "reshape",
    "scatter",
    "set_default_dtype",
    "set_strict",
    "softmax",
    "stop_gradient",
    "strict_mode",
    "take",
    "transpose",
    "where",
]
