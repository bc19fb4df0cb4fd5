"""Language-aware domain generalisation for cross-scene hyperspectral classification."""

__version__ = "0.1.0"
