"""Spot-centered patch tiling and frozen CNN feature extraction."""

from .errors import (
    FormatError,
    NumericalError,
    PatchfeatError,
    UsageError,
    ValidationError,
)
from .extract import crop_patches, extract, load_backbone, run_backbone
from .spots import Spot, read_spot_table

__version__ = "0.1.0"

__all__ = [
    "FormatError",
    "NumericalError",
    "PatchfeatError",
    "Spot",
    "UsageError",
    "ValidationError",
    "crop_patches",
    "extract",
    "load_backbone",
    "read_spot_table",
    "run_backbone",
    "__version__",
]
