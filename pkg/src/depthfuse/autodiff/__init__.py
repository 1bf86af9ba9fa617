"""Minimal dense tensors with reverse-mode autodiff, AdamW and checkpoints."""

from . import ops
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .params import Parameter, adam_step, conv_params, kaiming_uniform, zero_grad
from .tensor import (
    GradTape,
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    check_finite_enabled,
    set_check_finite,
)

__all__ = [
    "ops", "Tensor", "Parameter", "GradTape", "backward", "adam_step", "zero_grad",
    "conv_params", "kaiming_uniform", "save_tensors", "load_tensors", "as_tensor",
    "CheckpointError", "GraphError", "NonFiniteError", "ShapeError",
    "set_check_finite", "check_finite_enabled",
]
