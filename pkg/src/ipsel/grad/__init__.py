"""Dense-array engine: tensors, reverse-mode tape, layers, ledger, RNG."""

from . import ops
from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .engine import (backward, eval_mode, finite_checks, fresh_tape, grad_mode,
                     is_training, no_grad, no_grad_scope, tape, train_mode,
                     use_ledger)
from .gradcheck import check_gradients
from .layers import BatchNorm2d, Conv2d, Dropout, LayerNorm, Linear, Module
from .ledger import CATEGORIES, MemoryLedger
from .ops import primitive_forward
from .rng import StreamSet, named_stream
from .tensor import F32, F64, Tensor, constant, parameter

__all__ = [
    "ops", "Tensor", "constant", "parameter", "F32", "F64",
    "backward", "no_grad", "no_grad_scope", "grad_mode", "eval_mode",
    "train_mode", "is_training", "tape", "fresh_tape", "use_ledger",
    "finite_checks", "check_gradients", "primitive_forward",
    "Module", "Linear", "Conv2d", "BatchNorm2d", "LayerNorm", "Dropout",
    "MemoryLedger", "CATEGORIES", "StreamSet", "named_stream",
    "save_checkpoint", "load_checkpoint", "load_into",
]
