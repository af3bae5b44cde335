from . import functional
from .functional import BatchNormState
from .gradcheck import finite_difference_check
from .optim import Adam, AdamState, adam_step
from .tensor import Tape, Tensor, active_tape, as_tensor, no_grad

__all__ = [
    "Adam",
    "AdamState",
    "BatchNormState",
    "Tape",
    "Tensor",
    "active_tape",
    "adam_step",
    "as_tensor",
    "finite_difference_check",
    "functional",
    "no_grad",
]
