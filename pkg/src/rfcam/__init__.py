"""Spurious-correlation detection for CNN image classifiers.

Contrasts robust-feature saliency maps (RF-CAM, built from per-class
surrogate-model Shapley attributions) with gradient saliency maps
(Grad-CAM), flags instances whose maps disagree beyond a threshold, and
propagates confirmed findings to similar instances via neural-feature
retrieval.
"""

__version__ = "0.1.0"

from rfcam.errors import FormatError, NotFoundError, ValidationError

__all__ = ["FormatError", "NotFoundError", "ValidationError", "__version__"]
