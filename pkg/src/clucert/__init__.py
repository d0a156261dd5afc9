"""Certified robustness of text classifiers against word substitutions."""

from .bounds import (
    ConfidenceBound,
    RadiusOutcome,
    certified_radius,
    clopper_pearson,
    delta_shift,
    predict_improved_radius,
)
from .clustering import ClusterParams, dbscan
from .perturbation import Lexicon, substitute
from .smoothing import CertificationResult, SmoothingConfig, certify, predict

__version__ = "0.1.0"

__all__ = [
    "CertificationResult",
    "ClusterParams",
    "ConfidenceBound",
    "Lexicon",
    "RadiusOutcome",
    "SmoothingConfig",
    "certified_radius",
    "certify",
    "clopper_pearson",
    "dbscan",
    "delta_shift",
    "predict",
    "predict_improved_radius",
    "substitute",
]
