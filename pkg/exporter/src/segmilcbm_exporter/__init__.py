"""Adapter that turns image folder datasets into rawdet/bagpack files for
the segmilcbm engine, via pluggable model backends."""

__version__ = "0.1.0"

from .backends import BuiltinBackend, FoundationBackend, ModelLoadError
from .pipeline import ExportConfig, ExportResult, export

__all__ = [
    "BuiltinBackend",
    "ExportConfig",
    "ExportResult",
    "FoundationBackend",
    "ModelLoadError",
    "export",
    "__version__",
]
