"""Tensor core: tape autodiff, transformer building-block ops, gradient checks."""

from .gradcheck import GradCheckReport, check_gradients
from .tensor import (
    FINITE_CHECKS,
    GradientStateError,
    NonFiniteError,
    NumericsError,
    ShapeError,
    Tape,
    Tensor,
    active_tape,
    add,
    backward,
    conv1d,
    conv1d_transpose,
    cross_entropy_loss,
    dropout,
    embedding,
    gelu,
    huber_loss,
    layer_norm,
    matmul,
    mul,
    neg,
    relu,
    reshape,
    softmax,
    sub,
    tmean,
    transpose,
    tsum,
)

__all__ = [
    "FINITE_CHECKS",
    "GradCheckReport",
    "GradientStateError",
    "NonFiniteError",
    "NumericsError",
    "ShapeError",
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "backward",
    "check_gradients",
    "conv1d",
    "conv1d_transpose",
    "cross_entropy_loss",
    "dropout",
    "embedding",
    "gelu",
    "huber_loss",
    "layer_norm",
    "matmul",
    "mul",
    "neg",
    "relu",
    "reshape",
    "softmax",
    "sub",
    "tmean",
    "transpose",
    "tsum",
]
