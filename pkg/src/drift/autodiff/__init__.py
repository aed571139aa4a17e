from . import functional
from .gradcheck import grad_check, grad_check_module, rel_error
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, Parameter
from .tensor import NonFiniteError, Tape, Tensor, backward, current_tape, no_grad, set_debug

__all__ = [
    "functional", "grad_check", "grad_check_module", "rel_error", "FeedForward", "LayerNorm", "Linear", "Module",
    "MultiHeadAttention", "Parameter", "NonFiniteError", "Tape", "Tensor", "backward",
    "current_tape", "no_grad", "set_debug",
]
