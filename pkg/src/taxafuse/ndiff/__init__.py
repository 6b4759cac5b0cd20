"""Minimal reverse-mode autodiff core: tensors, layers, SGD, checkpoints."""

from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    avg_pool2d,
    clamp_min,
    concat,
    conv2d,
    dense,
    dropout,
    exp,
    gather_rows,
    global_avg_pool,
    log,
    log_softmax,
    matmul,
    mul,
    parameter,
    relu,
    reshape,
    segment_sum,
    sigmoid,
    softmax,
    tmean,
    tsum,
)
from .optim import SGD, DivergenceError, ParameterGroup, ReduceLROnPlateau
from .checkpoint import CheckpointError, CheckpointMeta, load_checkpoint, save_checkpoint
from .gradcheck import check_gradients, max_relative_error, numerical_gradient

__all__ = [
    "SGD",
    "CheckpointError",
    "CheckpointMeta",
    "DivergenceError",
    "ParameterGroup",
    "ReduceLROnPlateau",
    "ShapeError",
    "Tensor",
    "add",
    "as_tensor",
    "avg_pool2d",
    "check_gradients",
    "clamp_min",
    "concat",
    "conv2d",
    "dense",
    "dropout",
    "exp",
    "gather_rows",
    "global_avg_pool",
    "load_checkpoint",
    "log",
    "log_softmax",
    "matmul",
    "max_relative_error",
    "mul",
    "numerical_gradient",
    "parameter",
    "relu",
    "reshape",
    "save_checkpoint",
    "segment_sum",
    "sigmoid",
    "softmax",
    "tmean",
    "tsum",
]
