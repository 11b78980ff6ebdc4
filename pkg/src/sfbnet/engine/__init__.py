"""Minimal tensor container and reverse-mode autodiff."""
from . import flops, gradcheck, ops
from .module import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    glorot_uniform,
    he_uniform,
)
from .tensor import GradTape, Parameter, Tensor, grad_enabled, no_grad

__all__ = [
    "BatchNorm2d",
    "Conv2d",
    "ConvTranspose2d",
    "GradTape",
    "LayerNorm",
    "Linear",
    "Module",
    "ModuleList",
    "Parameter",
    "Tensor",
    "flops",
    "glorot_uniform",
    "gradcheck",
    "grad_enabled",
    "he_uniform",
    "no_grad",
    "ops",
]
