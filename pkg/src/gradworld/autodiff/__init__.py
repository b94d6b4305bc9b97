"""Reverse-mode autodiff substrate: tensors, tapes, ops, optimizer, checkpoints."""

from .tensor import (
    DomainError,
    as_tensor,
    OP_REGISTRY,
    ShapeError,
    Tape,
    Tensor,
    acos,
    add,
    backward,
    broadcast_to,
    clamp,
    concat,
    div,
    exp,
    forward,
    grads_by_name,
    layer_norm,
    linear,
    log,
    matmul,
    mean,
    mul,
    neg,
    quat_normalize,
    relu,
    reshape,
    rotmat_compose,
    sdpa,
    sigmoid,
    slice_,
    smooth_l1,
    softmax,
    sqrt,
    squared_error,
    stop_gradient,
    sub,
    sum_,
    tanh,
    transpose,
)
from .optim import adamw_step, clip_global_norm, cosine_lr, init_adam_state
from .checkpoint import load_params, save_params

__all__ = [
    "DomainError",
    "as_tensor",
    "OP_REGISTRY",
    "ShapeError",
    "Tape",
    "Tensor",
    "acos",
    "adamw_step",
    "add",
    "backward",
    "broadcast_to",
    "clamp",
    "clip_global_norm",
    "concat",
    "cosine_lr",
    "div",
    "exp",
    "forward",
    "grads_by_name",
    "init_adam_state",
    "layer_norm",
    "linear",
    "load_params",
    "log",
    "matmul",
    "mean",
    "mul",
    "neg",
    "quat_normalize",
    "relu",
    "reshape",
    "rotmat_compose",
    "save_params",
    "sdpa",
    "sigmoid",
    "slice_",
    "smooth_l1",
    "softmax",
    "sqrt",
    "squared_error",
    "stop_gradient",
    "sub",
    "sum_",
    "tanh",
    "transpose",
]
