"""Minimal float32 tensor engine with reverse-mode autodiff."""
from pgcn.autodiff.tensor import (
    DTYPE,
    GradGraph,
    Tensor,
    add,
    as_tensor,
    concat,
    div,
    flip,
    getitem,
    is_grad_enabled,
    matmul,
    mean,
    mul,
    no_grad,
    reshape,
    roll,
    sub,
    transpose,
    tsum,
)
from pgcn.autodiff.functional import (
    batch_norm,
    conv2d,
    elementwise,
    exp,
    gelu,
    layer_norm,
    linear,
    max_pool2d,
    mse_loss,
    normalize,
    relu,
    resize_bilinear,
    sigmoid,
    softmax,
    tabs,
)
from pgcn.autodiff.nn import BatchNorm2d, Conv2d, LayerNorm, Linear, Module, Parameter
from pgcn.autodiff.optim import Adam, OptimizerState
