"""Factor-driven correlation models, Bayesian factor selection, NIG laws of the
model coefficients and reverse stress testing of portfolio VaR."""

from .corrmodel import (
    CorrelationMatrix,
    CorrelationParams,
    FactorAssignment,
    apply_scenario,
    calibrate,
    calibrate_fit,
    model_correlation,
    nearest_correlation,
    repair,
    stressed_correlation,
)
from .distfit import NIGParams, fit_em, nig_logdensity, sample_nig
from .exceptions import (
    CalibrationError,
    CorrStressError,
    IngestError,
    NumericalError,
    SingularCovarianceError,
    ValidationError,
)
from .factorselect import PIPResult, select_factors
from .ingest import Manifest, ReturnPanel, load_prices, make_schedule, window_slice
from .stress import (
    PortfolioSpec,
    StressResult,
    hdr_threshold,
    mahalanobis,
    reverse_stress_historical,
    reverse_stress_mc,
    stressed_var_series,
    var_gaussian,
)

__version__ = "0.1.0"

__all__ = [
    "CalibrationError", "CorrStressError", "CorrelationMatrix", "CorrelationParams", "FactorAssignment",
    "IngestError", "Manifest", "NIGParams", "NumericalError", "PIPResult", "PortfolioSpec", "ReturnPanel",
    "SingularCovarianceError", "StressResult", "ValidationError", "apply_scenario", "calibrate",
    "calibrate_fit", "fit_em", "hdr_threshold", "load_prices", "mahalanobis", "make_schedule",
    "model_correlation", "nearest_correlation", "nig_logdensity", "repair", "reverse_stress_historical",
    "reverse_stress_mc", "sample_nig", "select_factors", "stressed_correlation", "stressed_var_series",
    "var_gaussian", "window_slice",
]
