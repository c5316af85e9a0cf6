"""Tail-risk constrained policy optimization at desk scale."""

from .config import TrainConfig, load_config
from .evt import GpdParams, TailModel, fit_gpd_mle, risk_boundary
from .train import EpochMetrics, evaluate, ratio_metric, train

__version__ = "0.1.0"

__all__ = ["TrainConfig", "load_config", "GpdParams", "TailModel", "fit_gpd_mle",
           "risk_boundary", "EpochMetrics", "evaluate", "ratio_metric", "train"]
