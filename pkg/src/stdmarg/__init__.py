"""Marginal mean estimation for randomized trials.

Crude, standardized (g-computation) and augmented estimators of
arm-specific marginal means, with sandwich-based variances, a GLM/NB2
fitting core, a Monte Carlo study harness and a CSV command line tool.
"""

from .cli_io import AnalysisConfig, DataSchema, ModelConfig, analyze, load_dataset, render_report
from .dataset import TrialDataset
from .glm_core import FitResult, ModelSpec, fit, predict_mean
from .marginal import MarginalEstimate, augmented, confidence_interval, mu1, mu2, mu3
from .trial_sim import (
    RandomizationScheme,
    ScenarioSpec,
    SimulationConfig,
    SimulationReport,
    generate_scenario,
    run_simulation,
)

__version__ = "0.1.0"

__all__ = [
    "AnalysisConfig",
    "DataSchema",
    "FitResult",
    "MarginalEstimate",
    "ModelConfig",
    "ModelSpec",
    "RandomizationScheme",
    "ScenarioSpec",
    "SimulationConfig",
    "SimulationReport",
    "TrialDataset",
    "analyze",
    "augmented",
    "confidence_interval",
    "fit",
    "generate_scenario",
    "load_dataset",
    "mu1",
    "mu2",
    "mu3",
    "predict_mean",
    "render_report",
    "run_simulation",
]
