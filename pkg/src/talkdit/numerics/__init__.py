from .autodiff import directional_derivative, finite_diff_grad, finite_diff_sample, forward_backward, relative_error
from .optim import OptimizerState, adamw_step
from .rng import Rng, gaussian, integers, uniform
from .tensor import (
    NumericalError,
    Tape,
    Tensor,
    add,
    as_tensor,
    concat,
    gelu,
    getitem,
    layer_norm,
    masked,
    matmul,
    mean,
    mul,
    reshape,
    softmax,
    sub,
    tensor_sum,
    transpose,
)

__all__ = [
    "NumericalError", "OptimizerState", "Rng", "Tape", "Tensor", "adamw_step", "add",
    "as_tensor", "concat", "directional_derivative", "finite_diff_grad", "finite_diff_sample", "forward_backward", "gaussian", "gelu",
    "getitem", "integers", "layer_norm", "masked", "matmul", "mean", "mul",
    "relative_error", "reshape", "softmax", "sub", "tensor_sum", "transpose", "uniform",
]
