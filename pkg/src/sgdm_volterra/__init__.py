"""Volterra-equation predictions for mini-batch SGD with momentum on least squares."""
from .kernels import BACKEND
from .spectrum import (ConditionReport, Spectrum, condition_report, empirical_spectrum,
                       explicit_spectrum, mp_spectrum)
from .volterra import (Hyperparams, ModeCoefficients, ModeTransfer, VolterraSolution, forcing,
                       forcing_h, forcing_oracle, kernel, kernel_norm, mode_coefficients,
                       mode_transfer, solve_volterra)

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ConditionReport", "Spectrum", "condition_report", "empirical_spectrum",
    "explicit_spectrum", "mp_spectrum", "Hyperparams", "ModeCoefficients", "ModeTransfer",
    "VolterraSolution", "forcing", "forcing_h", "forcing_oracle", "kernel", "kernel_norm",
    "mode_coefficients", "mode_transfer", "solve_volterra",
]
