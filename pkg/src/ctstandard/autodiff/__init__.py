"""Minimal dense tensors with reverse-mode automatic differentiation."""

from . import functional
from .checkpoint import CheckpointError, dump_checkpoint, load_checkpoint, parse_checkpoint, save_checkpoint
from .gradcheck import GradCheckResult, grad_check
from .optim import SGD, MissingGradientError, sgd_momentum_step
from .tensor import NotScalarError, ShapeError, Tape, Tensor, active_tape, backward

__all__ = [
    "functional",
    "CheckpointError",
    "dump_checkpoint",
    "load_checkpoint",
    "parse_checkpoint",
    "save_checkpoint",
    "GradCheckResult",
    "grad_check",
    "SGD",
    "MissingGradientError",
    "sgd_momentum_step",
    "NotScalarError",
    "ShapeError",
    "Tape",
    "Tensor",
    "active_tape",
    "backward",
]
