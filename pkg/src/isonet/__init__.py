"""Isometric convolutional networks and input-vs-internal resolution analysis."""
from .arch import ArchError, ArchSpec, LayerSpec, apply_multiplier, build_isometric, build_pyramid
from .analyzer import analyze
from .network import Network

__version__ = "0.1.0"

__all__ = ["ArchError", "ArchSpec", "LayerSpec", "Network", "analyze", "apply_multiplier",
           "build_isometric", "build_pyramid", "__version__"]
