"""Dense tensors, the differentiable op catalog, gradient checking and I/O."""

from . import ops
from .gradcheck import GradCheckReport, check_registered_ops, grad_check
from .io import load_checkpoint, load_tensor, save_checkpoint, save_tensor
from .module import Module, param
from .optim import Adam
from .rng import Rng
from .tensor import (
    MissingVjpError,
    NonFiniteError,
    NumericsError,
    OpDef,
    OpNode,
    ShapeError,
    Tensor,
    backward,
    get_op,
    no_grad,
    register_op,
    registered_ops,
    unregister_op,
)

__all__ = [
    "ops", "GradCheckReport", "check_registered_ops", "grad_check", "load_checkpoint", "load_tensor",
    "save_checkpoint", "save_tensor", "Module", "param", "Adam", "Rng", "MissingVjpError",
    "NonFiniteError", "NumericsError", "OpDef", "OpNode", "ShapeError", "Tensor", "backward", "get_op",
    "no_grad", "register_op", "registered_ops", "unregister_op",
]
