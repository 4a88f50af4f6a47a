"""Jacobian regularization for small multilayer perceptrons, in numpy."""

from .data import Dataset, Normalizer, load_idx, load_mnist5k, synthetic_blobs
from .jacreg import (
    ConfigError,
    EstimatorStats,
    JacobianResult,
    cyclopropagation,
    estimator_stats,
    jacreg_estimate,
    jacreg_exact,
    sample_unit_sphere,
)
from .nn import Mlp, forward, input_jacobian, load_model, predict, save_model, xavier_init
from .robust import AttackConfig, RobustnessCurve, accuracy_under_noise, fooling_distances
from .slices import DecisionSlice, decision_slice
from .train import TrainConfig, TrainHistory, build_model, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "ConfigError",
    "Dataset",
    "DecisionSlice",
    "EstimatorStats",
    "JacobianResult",
    "Mlp",
    "Normalizer",
    "RobustnessCurve",
    "TrainConfig",
    "TrainHistory",
    "accuracy_under_noise",
    "build_model",
    "cyclopropagation",
    "decision_slice",
    "estimator_stats",
    "evaluate",
    "fooling_distances",
    "forward",
    "input_jacobian",
    "jacreg_estimate",
    "jacreg_exact",
    "load_idx",
    "load_mnist5k",
    "load_model",
    "predict",
    "sample_unit_sphere",
    "save_model",
    "synthetic_blobs",
    "train",
    "xavier_init",
]
