"""Lexical-aware non-autoregressive speech recognition at desk scale."""

from .autodiff import Tensor, check_gradient, no_grad

__all__ = ["Tensor", "check_gradient", "no_grad"]
__version__ = "0.1.0"
