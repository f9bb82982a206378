"""Minimal reverse-mode NN core: tensors, layers, optimizer, gradient checks."""

from . import tensor
from .gradcheck import grad_check, kink_margin, resample_until_smooth
from .layers import Affine, BatchNorm, BiLSTM, ConvBNReLU, DownBlock, UpBlock, collect_params
from .optim import Adam
from .tensor import Tape, Tensor, default_dtype, set_default_dtype

__all__ = [
    "tensor",
    "Tape",
    "Tensor",
    "Adam",
    "Affine",
    "BatchNorm",
    "BiLSTM",
    "ConvBNReLU",
    "DownBlock",
    "UpBlock",
    "collect_params",
    "grad_check",
    "kink_margin",
    "resample_until_smooth",
    "default_dtype",
    "set_default_dtype",
]
