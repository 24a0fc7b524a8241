"""Sorption isotherm identifiability, calibration and model selection."""

from .models import (CONSTANTS, OMEGA_A, PRIOR_BOUNDS, ActivityDomain, CustomModel, Model,
                     eval_grad, eval_model)

__version__ = "0.1.0"

__all__ = ["Model", "CustomModel", "ActivityDomain", "OMEGA_A", "CONSTANTS", "PRIOR_BOUNDS",
           "eval_model", "eval_grad", "__version__"]
