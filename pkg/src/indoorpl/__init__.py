"""Indoor path-loss regression, shadow-fading analysis and fade-margin calibration."""

__version__ = "0.1.0"

from .anova import anova, nested_partial_f, partial_f, vif
from .campaign import CleaningConfig, chronological_split, clean, parse_campaign_csv
from .cross_validation import make_time_blocked_folds, run_cv
from .diagnostics import dip_test, kde_fft, mode_count_curve, silverman_critical_bandwidth
from .fade_margin import bootstrap_ci, calibrate, pdr_sweep, prescribe_fm
from .features import FeatureSpec, PathLossFeatures, build_design
from .regression import (
    BayesianPathLossRegressor,
    LinearPathLossRegressor,
    PathLossModel,
    make_model,
)
from .residuals import GaussianMixture1D, fit_all, fit_distribution, fit_gmm, select_residual_model
from .synthetic import GroundTruth, generate_campaign

__all__ = [
    "anova", "nested_partial_f", "partial_f", "vif",
    "CleaningConfig", "chronological_split", "clean", "parse_campaign_csv",
    "make_time_blocked_folds", "run_cv",
    "dip_test", "kde_fft", "mode_count_curve", "silverman_critical_bandwidth",
    "bootstrap_ci", "calibrate", "pdr_sweep", "prescribe_fm",
    "FeatureSpec", "PathLossFeatures", "build_design",
    "BayesianPathLossRegressor", "LinearPathLossRegressor", "PathLossModel", "make_model",
    "GaussianMixture1D", "fit_all", "fit_distribution", "fit_gmm", "select_residual_model",
    "GroundTruth", "generate_campaign",
]
