"""Multi-head convolutional image denoiser with multi-path attention,
built on a minimal reverse-mode autodiff tensor core."""

__version__ = "0.1.0"

from .nn import MHCNNModel, ModelConfig, init_params
from .tensor import Tape, Tensor, TensorError, gradcheck, no_grad

__all__ = [
    "MHCNNModel",
    "ModelConfig",
    "Tape",
    "Tensor",
    "TensorError",
    "gradcheck",
    "init_params",
    "no_grad",
    "__version__",
]
