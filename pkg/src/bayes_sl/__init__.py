"""Dropout-based Bayesian prediction trained with synthetic likelihoods."""
from .dropout import (ModelSample, PredictiveEnsemble, VariationalModel, count_units, kl_regularizer,
                      predictive_ensemble, sample_model)
from .errors import (BayesSLError, ConfigError, DataError, DimensionError, FormatError, TrainingError,
                     UsageError)
from .head import GaussianPrediction, HeadConfig, MixtureDistribution, gaussian_nll, mixture_cll
from .metrics import calibration, miou, mode_coverage, top_k_percent
from .synthetic import Discriminator, HybridLossConfig, TrainState, synthetic_ll, train_step
from .tensor import Tensor, backward

__all__ = [
    "BayesSLError", "ConfigError", "DataError", "DimensionError", "Discriminator", "FormatError",
    "GaussianPrediction", "HeadConfig", "HybridLossConfig", "MixtureDistribution", "ModelSample",
    "PredictiveEnsemble", "Tensor", "TrainState", "TrainingError", "UsageError", "VariationalModel",
    "backward", "calibration", "count_units", "gaussian_nll", "kl_regularizer", "miou", "mixture_cll",
    "mode_coverage", "predictive_ensemble", "sample_model", "synthetic_ll", "top_k_percent", "train_step",
]
