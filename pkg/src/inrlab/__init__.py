"""Coordinate networks (SIREN, Fourier-feature MLP, key-table and hash-grid
encoders, and their variants with an analytic coordinate branch) written
against numpy with explicit reverse-mode gradients."""

from .diffcore import ConfigError, DomainError, NonFiniteError, Parameter, UsageError
from .models import KINDS, Model, ModelConfig, build_model
from .optim import Adam
from .tasks import ImageTask, RunRecord, SdfTask, StripeTask, fit, iou, psnr

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "ConfigError",
    "DomainError",
    "ImageTask",
    "KINDS",
    "Model",
    "ModelConfig",
    "NonFiniteError",
    "Parameter",
    "RunRecord",
    "SdfTask",
    "StripeTask",
    "UsageError",
    "build_model",
    "fit",
    "iou",
    "psnr",
]
