"""Unrolled soft-thresholding networks: model, training, bounds and experiment tooling."""

from .model import (
    Architecture, ConvDict, DenseDict, DimensionMismatch, HypothesisClassSpec, Params, decode,
    forward,
)
from .numkit import NonConvergence, SeededRng

__version__ = "0.1.0"

__all__ = [
    "Architecture", "ConvDict", "DenseDict", "DimensionMismatch", "HypothesisClassSpec",
    "NonConvergence", "Params", "SeededRng", "decode", "forward",
]
