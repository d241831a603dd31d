"""Minimal reverse-mode autodiff core with the layer set the pipeline needs."""

from . import tensor
from .checkpoint import CheckpointFormatError, read_checkpoint, write_checkpoint
from .gradcheck import gradient_check
from .layers import (
    attention_block_forward,
    init_attention_block,
    init_mlp,
    mlp_forward,
    mlp_forward_np,
)
from .losses import chamfer, l2_row_mean
from .optim import ParameterStore, adam_step, collect_grads, uniform_init
from .tensor import ShapeError, Tensor

__all__ = [
    "tensor",
    "Tensor",
    "ShapeError",
    "ParameterStore",
    "adam_step",
    "collect_grads",
    "uniform_init",
    "init_mlp",
    "mlp_forward",
    "mlp_forward_np",
    "init_attention_block",
    "attention_block_forward",
    "chamfer",
    "l2_row_mean",
    "gradient_check",
    "read_checkpoint",
    "write_checkpoint",
    "CheckpointFormatError",
]
