"""Converter from torch conv backbones to the portable PAMW weight format."""

__version__ = "0.1.0"

from .convert import extract_layers, source_distance
from .export import export_weights, fixture_images
from .models import mini_maxpool_model, mini_model
from .writer import ExportedLayer, ExportError, write_pamw

__all__ = [
    "ExportError", "ExportedLayer", "export_weights", "extract_layers",
    "fixture_images", "mini_maxpool_model", "mini_model", "source_distance",
    "write_pamw",
]
