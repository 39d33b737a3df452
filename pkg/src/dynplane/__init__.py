"""Occupancy networks with learned projection planes, on a small numpy autodiff engine."""

from .autodiff import Tensor, grad_check, no_grad, precision
from .networks import DynamicPlaneONet, EncoderConfig
from .training import TrainConfig, train

__all__ = ["Tensor", "grad_check", "no_grad", "precision", "DynamicPlaneONet", "EncoderConfig", "TrainConfig", "train"]
__version__ = "0.1.0"
