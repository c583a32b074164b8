"""Hierarchical Visual Transformer on a float64 numpy autodiff core."""

from .config import ConfigError, ModelConfig, PRESETS, preset, stage_schedule
from .cost import compression_ratio, model_flops, model_params, scale_search
from .model import HvtModel, hvt_forward, init_model
from .tensor import Tensor, backward, grad_check, no_grad
from .train import TrainSettings, evaluate, train

__all__ = [
    "ConfigError", "ModelConfig", "PRESETS", "preset", "stage_schedule",
    "compression_ratio", "model_flops", "model_params", "scale_search",
    "HvtModel", "hvt_forward", "init_model",
    "Tensor", "backward", "grad_check", "no_grad",
    "TrainSettings", "evaluate", "train",
]
__version__ = "0.1.0"
