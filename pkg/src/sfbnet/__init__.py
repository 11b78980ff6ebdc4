"""Gated-skip segmentation network on a small numpy autodiff engine."""
from . import attention, engine, loss, model, pipeline, sfb, train, verify
from .model import ModelConfig, SFBNet, build_model, count_flops, count_parameters

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "SFBNet",
    "attention",
    "build_model",
    "count_flops",
    "count_parameters",
    "engine",
    "loss",
    "model",
    "pipeline",
    "sfb",
    "train",
    "verify",
]
