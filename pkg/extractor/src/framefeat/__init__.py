"""Frozen-CNN frame feature extraction into ENGFEAT1 containers."""

from .extract import ExtractError, ExtractorConfig, extract, load_backbone

__version__ = "0.1.0"
__all__ = ["ExtractError", "ExtractorConfig", "extract", "load_backbone"]
