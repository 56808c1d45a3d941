"""Windowed, differentially private count featurization."""

from hotcount.kernels import BACKEND
from hotcount.sketch import Sketch, SketchKind, merge, new_sketch

__version__ = "0.1.0"

__all__ = ["BACKEND", "Sketch", "SketchKind", "merge", "new_sketch", "__version__"]
