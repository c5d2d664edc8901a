"""Worker-side SDK for the inline CMR model-worker tensor protocol."""

from .registry import ModelRegistry, registration

__all__ = ["ModelRegistry", "registration"]

__version__ = "0.1.0"
