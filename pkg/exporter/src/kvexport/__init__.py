"""KV capture for transformers models, serialized as KVD1 containers."""

from .export import build_tiny_model, capture_kv, export_kv, load_model
from .kvd import encode_kvd
from .manifest import ExportManifest

__version__ = "0.1.0"

__all__ = [
    "build_tiny_model",
    "capture_kv",
    "export_kv",
    "load_model",
    "encode_kvd",
    "ExportManifest",
]
