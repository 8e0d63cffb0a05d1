"""Longitudinal factor regression for correlated, repeatedly measured exposures."""

from __future__ import annotations

from .data import ExposureDataset, read_dataset, standardize, write_dataset
from .errors import LowFRError
from .fit import FitOptions, FitResult, ModelKind, fit_model, read_fit, write_fit
from .induced import InducedCoefficients, InducedDraws, induced_coefficients
from .model import HyperParams, ModelSpec, Variant
from .sampler import PosteriorDraws, SamplerConfig

__version__ = "1.0.0"

__all__ = [
    "ExposureDataset",
    "FitOptions",
    "FitResult",
    "HyperParams",
    "InducedCoefficients",
    "InducedDraws",
    "LowFRError",
    "ModelKind",
    "ModelSpec",
    "PosteriorDraws",
    "SamplerConfig",
    "Variant",
    "fit_model",
    "induced_coefficients",
    "read_dataset",
    "read_fit",
    "standardize",
    "write_dataset",
    "write_fit",
]
