"""Minimal reverse-mode automatic differentiation over float64 numpy arrays."""

from .checkpoint import load_parameters, save_parameters
from .gradcheck import check_gradients, numerical_grad, probe_gradients, relative_error
from .ops import (
    abs_,
    add,
    concat,
    conv2d,
    div,
    elementwise,
    exp,
    gather,
    layer_norm,
    leaky_relu,
    linear,
    log,
    matmul,
    mul,
    neg,
    reduce,
    relu,
    repeat_cols,
    reshape,
    row_norm,
    scale,
    softmax,
    square,
    sub,
    take,
    tanh,
    transpose,
)
from .optim import Adam, StepSchedule, adam_step
from .tensor import Tensor, as_tensor, backward, make_node, topological_order
