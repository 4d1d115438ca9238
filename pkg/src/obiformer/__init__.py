"""Glyph-guided attentive denoising for oracle bone inscription images."""

from .model import (
    ModelConfig,
    OBIFormer,
    build_model,
    count_parameters,
    forward,
)

__all__ = ["ModelConfig", "OBIFormer", "build_model", "count_parameters", "forward"]
__version__ = "0.1.0"
