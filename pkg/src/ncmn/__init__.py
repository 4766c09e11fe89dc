"""Multiplicative noise, non-correlating multiplicative noise and shake-shake
on a small float64 reverse-mode autodiff engine."""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, gradient_truncation, no_grad, stop_gradient
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DegenerateInputError,
    DivergenceError,
    NCMNError,
    NumericError,
    ShapeError,
)
from .layers import BNLayer, BNParams, ConvParams, DenseParams
from .noise import NoiseSpec, ShakeConfig, make_rng
from .training import ModelConfig, build_model, train


__all__ = [
    "BNLayer", "BNParams", "ConfigError", "ContractError", "ConvParams", "DataError", "DegenerateInputError",
    "DenseParams", "DivergenceError", "ModelConfig", "NCMNError", "NoiseSpec", "NumericError", "ShakeConfig",
    "ShapeError", "Tensor", "backward", "build_model", "gradient_truncation", "make_rng", "no_grad",
    "stop_gradient", "train",
]
