"""Minimal reverse-mode autodiff engine and the layers the translator needs."""

from .gradcheck import GradCheckReport, check_gradients, directional_check, grad_check
from .ops import (
    band_mask,
    conv,
    conv2d,
    conv2d_transpose,
    conv3d,
    dense_attention,
    layer_norm,
    linear,
    maxpool,
    maxpool3d,
    sliding_window_attention,
    softmax,
)
from .tensor import (
    Tensor,
    abs_,
    add,
    as_tensor,
    backward,
    clip,
    concat,
    div,
    exp,
    finite_checks,
    grad,
    is_grad_enabled,
    leaky_relu,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    sigmoid,
    sqrt,
    stack,
    sub,
    sum_,
    take,
    topological_order,
    transpose,
)
