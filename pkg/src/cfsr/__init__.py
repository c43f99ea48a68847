"""CFSR: a lightweight ConvFormer-style super-resolution engine.

Forward inference, toy-scale training, inference-time fusion of the
edge-preserving depth-wise convolution, and analytic cost accounting.
"""

from .errors import (
    CfsrError,
    ConfigError,
    DataError,
    ModeError,
    NumericError,
    ShapeError,
)
from .tensor import GradTape, Tensor, backward
from .model import CfsrModel, ModelConfig, fuse_store
from .weights import WeightStore

__all__ = [
    "CfsrError",
    "ConfigError",
    "DataError",
    "ModeError",
    "NumericError",
    "ShapeError",
    "GradTape",
    "Tensor",
    "backward",
    "CfsrModel",
    "ModelConfig",
    "fuse_store",
    "WeightStore",
]

__version__ = "0.1.0"
