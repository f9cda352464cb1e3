"""Dense tensors, reverse-mode gradients, transformer layers and Adam."""
from . import kernels
from .checkpoint import CheckpointError, config_digest, load_checkpoint, save_checkpoint
from .gradcheck import finite_diff_check
from .layers import ConfigError, mha
from .optim import AdamState, adam_step, step_decay_lr
from .tensor import (
    ContractError,
    GradTape,
    ShapeError,
    Tensor,
    backward,
    concat,
    cumsum,
    gelu,
    layer_norm,
    linear,
    matmul,
    min_select,
    reshape,
    softmax,
    transpose,
)

__all__ = [
    "AdamState",
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "GradTape",
    "ShapeError",
    "Tensor",
    "adam_step",
    "backward",
    "concat",
    "config_digest",
    "cumsum",
    "finite_diff_check",
    "gelu",
    "kernels",
    "layer_norm",
    "linear",
    "load_checkpoint",
    "matmul",
    "mha",
    "min_select",
    "reshape",
    "save_checkpoint",
    "softmax",
    "step_decay_lr",
    "transpose",
]
