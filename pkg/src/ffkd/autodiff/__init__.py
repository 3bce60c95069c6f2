from . import functional
from .gradcheck import GradCheckReport, grad_check
from .optim import OptimizerState, adam_step, cosine_lr
from .tensor import (
    AutodiffError,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    active_tape,
    as_tensor,
    default_dtype,
    get_dtype,
)

__all__ = [
    "AutodiffError", "GradCheckReport", "NonFiniteError", "OptimizerState", "ShapeError",
    "Tape", "Tensor", "active_tape", "adam_step", "as_tensor", "cosine_lr", "default_dtype",
    "functional", "get_dtype", "grad_check",
]
