"""Small numpy tensor engine with tape-based reverse-mode differentiation."""
from . import functional
from .checkpoint import load_checkpoint, save_checkpoint
from .functional import MacCounter, count_macs
from .gradcheck import GradCheckReport, grad_check
from .layers import Conv2d, Deconv2d, Module, set_pad_mode
from .optim import Adam, adam_step
from .tensor import ShapeError, Tape, Tensor, backward, no_grad

__all__ = [
    "Adam",
    "Conv2d",
    "Deconv2d",
    "GradCheckReport",
    "MacCounter",
    "Module",
    "ShapeError",
    "Tape",
    "Tensor",
    "adam_step",
    "backward",
    "count_macs",
    "functional",
    "grad_check",
    "load_checkpoint",
    "no_grad",
    "save_checkpoint",
    "set_pad_mode",
]
