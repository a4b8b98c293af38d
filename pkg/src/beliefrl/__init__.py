"""Belief-state learning and offline policy optimization under
informative missingness."""

__version__ = "0.1.0"

from .config import (
    ConfigError,
    EvalConfig,
    ExperimentConfig,
    ModelConfig,
    RLConfig,
    SimConfig,
    TrainConfig,
)
from .simulator import (
    Episode,
    NormalizationStats,
    StepObservation,
    compute_normalization_stats,
    compute_summaries,
    generate_cohort,
    split_cohort,
)

__all__ = [
    "ConfigError",
    "EvalConfig",
    "Episode",
    "ExperimentConfig",
    "ModelConfig",
    "NormalizationStats",
    "RLConfig",
    "SimConfig",
    "StepObservation",
    "TrainConfig",
    "compute_normalization_stats",
    "compute_summaries",
    "generate_cohort",
    "split_cohort",
]
