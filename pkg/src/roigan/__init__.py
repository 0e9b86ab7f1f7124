"""roigan: target-area-aware multi-modality image translation on phantoms."""

__version__ = "0.1.0"
