"""Causal/dilated 1D convolutional QoE prediction engine."""

from cnnqoe.architecture import (
    ModelConfig,
    Model,
    build_model,
    count_flops,
    count_params,
    dilation_schedule,
    receptive_field,
    validate_config,
)
from cnnqoe.errors import CnnQoeError

__version__ = "0.1.0"

__all__ = [
    "CnnQoeError",
    "Model",
    "ModelConfig",
    "build_model",
    "count_flops",
    "count_params",
    "dilation_schedule",
    "receptive_field",
    "validate_config",
]
