"""Invariant signatures of planar curves, axiomatic and learned."""

from __future__ import annotations

from .curve import CurveError, PlanarCurve, normalize_curve, resample_uniform
from .invariants import Signature, euclidean_curvature, integral_area_invariant
from .net import Architecture, Model, forward, init_model, load_model, save_model

__version__ = "0.1.0"

__all__ = [
    "Architecture",
    "CurveError",
    "Model",
    "PlanarCurve",
    "Signature",
    "euclidean_curvature",
    "forward",
    "init_model",
    "integral_area_invariant",
    "load_model",
    "normalize_curve",
    "resample_uniform",
    "save_model",
]
