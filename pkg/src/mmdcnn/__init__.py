"""Cross-modal domain adaptation toolkit: a small CNN with an MMD regularizer."""

from .autodiff import Tensor, backward, grad_check, tensor_from

__all__ = ["Tensor", "backward", "grad_check", "tensor_from"]
__version__ = "0.1.0"
