"""Quantization-aware training toolkit for a toy silhouette gait model.

Fake quantization with learned step sizes, straight-through and soft-quantizer
gradients, two-stage training with a growing ``k``, inter-class distance
calibration, integer inference, retrieval metrics and BitOPs accounting, all
on a small numpy reverse-mode autodiff engine.
"""

from .errors import (ConfigError, DimensionError, GaitQATError, LoweringError, NumericError, TrainingError,
                     UsageError)
from .gaitnet import GaitNet, ModelSpec, QuantPolicy
from .quant import FULL_PRECISION, SOFT, STE, QuantConfig, Quantizer, fake_quantize
from .synthdata import DatasetConfig, generate_dataset
from .tensor import Tensor, backward
from .trainer import KSchedule, TrainPlan

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DimensionError", "GaitQATError", "LoweringError", "NumericError", "TrainingError",
    "UsageError", "GaitNet", "ModelSpec", "QuantPolicy", "FULL_PRECISION", "SOFT", "STE", "QuantConfig",
    "Quantizer", "fake_quantize", "DatasetConfig", "generate_dataset", "Tensor", "backward", "KSchedule",
    "TrainPlan",
]
