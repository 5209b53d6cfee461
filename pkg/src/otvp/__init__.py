"""Prompt-based test-time adaptation for a small vision transformer.

The package is built around three blocks: a minimal reverse-mode autodiff
engine (:mod:`otvp.autodiff`), entropic optimal transport between feature
clouds (:mod:`otvp.ot`), and the adaptation loop that learns prompt tokens
for a frozen encoder (:mod:`otvp.adapt`).
"""

from .autodiff import Tape, Tensor, backward

__all__ = ["Tape", "Tensor", "backward"]

__version__ = "0.1.0"
