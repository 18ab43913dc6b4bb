"""Amortised posterior estimation for simulators with mixed discrete and
continuous parameters."""

__version__ = "0.1.0"

from .calibration import CalibrationReport, calibration_report
from .estimator import MNPE, fit_mnpe
from .exceptions import (
    CapabilityError,
    CheckpointError,
    ConfigurationError,
    InputError,
    MixnpeError,
    ReferenceInvalidError,
    StabilityError,
    TrainingError,
)
from .made import CategoricalMade, DiscreteSchema
from .flow import SplineCouplingFlow
from .metrics import c2st, c2st_mixed, predictive_mse
from .reference import CoalPosterior, QueueReference, ToyPosterior, reference_for
from .simulators import (
    CoalMining,
    Dataset,
    GaussianToy,
    MixedParamSpace,
    TandemQueue,
    get_model,
    simulate_dataset,
)

__all__ = [
    "MNPE", "fit_mnpe", "DiscreteSchema", "CategoricalMade", "SplineCouplingFlow",
    "MixedParamSpace", "Dataset", "GaussianToy", "TandemQueue", "CoalMining",
    "get_model", "simulate_dataset", "ToyPosterior", "CoalPosterior", "QueueReference",
    "reference_for", "calibration_report", "CalibrationReport", "c2st", "c2st_mixed",
    "predictive_mse", "MixnpeError", "InputError", "ConfigurationError", "TrainingError",
    "CapabilityError", "StabilityError", "ReferenceInvalidError", "CheckpointError",
]
