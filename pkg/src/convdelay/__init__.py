"""Conversion-probability estimation under delayed, right-censored feedback."""

__version__ = "0.1.0"

from .core import (
    ClickData,
    ClickRecord,
    FeatureVector,
    ObservationSnapshot,
    conversion_probability,
    logistic,
    snapshot_at,
)
from .delay import DelayModel, build_fit_set
from .estimators import (
    ConversionFit,
    fit_bias_adjusted,
    fit_dfm,
    fit_naive,
    fit_oracle,
    standard_errors,
)
from .models import (
    BiasAdjustedConversionEstimator,
    DFMConversionEstimator,
    ExponentialDelayRegressor,
    NaiveConversionEstimator,
    WeibullDelayRegressor,
)
from .numerics import NewtonOptions

__all__ = [
    "BiasAdjustedConversionEstimator",
    "ClickData",
    "ClickRecord",
    "ConversionFit",
    "DFMConversionEstimator",
    "DelayModel",
    "ExponentialDelayRegressor",
    "FeatureVector",
    "NaiveConversionEstimator",
    "NewtonOptions",
    "ObservationSnapshot",
    "WeibullDelayRegressor",
    "build_fit_set",
    "conversion_probability",
    "fit_bias_adjusted",
    "fit_dfm",
    "fit_naive",
    "fit_oracle",
    "logistic",
    "snapshot_at",
    "standard_errors",
]
