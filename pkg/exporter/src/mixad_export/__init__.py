"""Export MVTec-style image datasets into mixad feature bundles."""

from .encoders import EncoderError, build_encoder
from .export import ExportError, ExportSpec, discover_classes, export

__all__ = [
    "EncoderError",
    "ExportError",
    "ExportSpec",
    "build_encoder",
    "discover_classes",
    "export",
]
