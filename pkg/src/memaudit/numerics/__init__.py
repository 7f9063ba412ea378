"""Small reverse-mode autodiff engine: tensors, 3D convolutions, losses, Adam."""
from .gradcheck import GradCheckReport, grad_check, relative_error
from .ops import (
    add,
    add_channel_bias,
    conv3d,
    dense,
    l1_loss,
    l2_norm,
    leaky_relu,
    mean_all,
    mse_loss,
    mul,
    relu,
    reshape,
    scale,
    square,
    sub,
    sum_all,
    tanh,
    transposed_conv3d,
)
from .optim import Adam, OptimizerState, adam_step
from .tensor import NonFiniteError, ShapeError, Tensor, backward, tape

__all__ = [
    "Adam", "GradCheckReport", "NonFiniteError", "OptimizerState", "ShapeError",
    "Tensor", "adam_step", "add", "add_channel_bias", "backward", "conv3d", "dense",
    "grad_check", "l1_loss", "l2_norm", "leaky_relu", "mean_all", "mse_loss", "mul",
    "relative_error", "relu", "reshape", "scale", "square", "sub", "sum_all", "tanh",
    "tape", "transposed_conv3d",
]
