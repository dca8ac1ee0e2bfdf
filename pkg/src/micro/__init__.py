"""Multimodal item recommendation over feature-derived item graphs, with attention fusion and an InfoNCE side objective."""

from .dataset import InteractionTable, SplitSpec, generate_synthetic, make_cold_split, make_warm_split
from .errors import (
    ConfigError,
    DataError,
    IncompatibleArtifactError,
    MicroError,
    NumericalError,
    ShapeError,
)
from .evaluation import MetricReport, evaluate, evaluate_scores
from .recommender import MicroModel, TrainerConfig, TrainResult, ablation_variant, train

__version__ = "0.1.0"
