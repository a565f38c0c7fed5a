"""Numerical core: tensors, autodiff tape, ops, optimizer, checkpoints."""

from . import nn, ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .optim import AdamW
from .tensor import (NonFiniteError, Tape, TapeError, Tensor, as_tensor,
                     backward)

__all__ = [
    "AdamW",
    "CheckpointError",
    "NonFiniteError",
    "Tape",
    "TapeError",
    "Tensor",
    "as_tensor",
    "backward",
    "load_checkpoint",
    "nn",
    "ops",
    "save_checkpoint",
]
