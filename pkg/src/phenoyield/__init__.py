"""Phenology-aware crop yield prediction from image and weather time series, on numpy."""

from .config import ModelConfig, RunConfig, StageConfig, load_config
from .datagen import CropSpec, Dataset, GenConfig, default_crops, fit_ols_oracle, generate_dataset, read_dataset
from .evalkit import MetricTriple, compute_metrics
from .model import PhenoYieldNet

__all__ = [
    "CropSpec", "Dataset", "GenConfig", "MetricTriple", "ModelConfig", "PhenoYieldNet", "RunConfig",
    "StageConfig", "compute_metrics", "default_crops", "fit_ols_oracle", "generate_dataset", "load_config",
    "read_dataset",
]
__version__ = "0.1.0"
