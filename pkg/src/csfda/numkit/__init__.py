"""Minimal float64 tensor library: autodiff ops, SGD, checkpoint I/O."""

from csfda.numkit.io import load_checkpoint, save_checkpoint
from csfda.numkit.optim import SGD, OptimizerState, sgd_step
from csfda.numkit.tensor import (
    Tensor,
    add,
    as_tensor,
    batchnorm,
    concat,
    exp,
    gather,
    l2_normalize,
    log,
    log_softmax,
    logsumexp,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    softmax,
    square,
    sub,
    sum,
    take,
    transpose,
)

__all__ = [
    "SGD",
    "OptimizerState",
    "Tensor",
    "add",
    "as_tensor",
    "batchnorm",
    "concat",
    "exp",
    "gather",
    "l2_normalize",
    "load_checkpoint",
    "log",
    "log_softmax",
    "logsumexp",
    "matmul",
    "mean",
    "mul",
    "relu",
    "reshape",
    "save_checkpoint",
    "sgd_step",
    "softmax",
    "square",
    "sub",
    "sum",
    "take",
    "transpose",
]
