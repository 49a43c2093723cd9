"""Observation-noise head: heteroscedastic Gaussian outputs and class mixtures."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DataError, DimensionError
from .tensor import Tensor

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
SIGMA_FLOOR = 1e-5
PROB_FLOOR = 1e-12
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class GaussianPrediction:
    mu: Tensor
    sigma: Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise DimensionError(f"mu {self.mu.shape} and sigma {self.sigma.shape} differ in shape")


def split_statistics(raw: Tensor, axis: int = 0, constant_sigma: float | None = None) -> GaussianPrediction:
    """Split ``2C`` channels along ``axis`` into means and log-variances.

    With ``constant_sigma`` the whole output is the mean and sigma is fixed.
    """
    if constant_sigma is not None:
        return GaussianPrediction(raw, Tensor(np.full(raw.shape, float(constant_sigma))))
    extent = raw.shape[axis]
    if extent % 2:
        raise DimensionError(f"split_statistics: axis {axis} has odd extent {extent} in {raw.shape}")
    c = extent // 2
    lead = (slice(None),) * (axis % raw.ndim)
    mu = T.take(raw, lead + (slice(0, c),))
    logvar = T.clip(T.take(raw, lead + (slice(c, extent),)), LOGVAR_MIN, LOGVAR_MAX)
    return GaussianPrediction(mu, T.exp(logvar * 0.5))


def reparameterized_sample(pred: GaussianPrediction, z) -> Tensor:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != pred.mu.shape:
        raise DimensionError(f"noise shape {z.shape} does not match mean shape {pred.mu.shape}")
    return pred.mu + T.mul(pred.sigma, z)


def class_probabilities(y_sample: Tensor, axis: int = 0) -> Tensor:
    return T.softmax(y_sample, axis=axis)


def gaussian_nll(pred: GaussianPrediction, y) -> Tensor:
    """Mean per-dimension negative log density of ``y`` under ``pred``."""
    y = T.as_tensor(y)
    if y.shape != pred.mu.shape:
        raise DimensionError(f"target shape {y.shape} does not match prediction {pred.mu.shape}")
    sigma = T.clip(pred.sigma, SIGMA_FLOOR, np.inf)
    resid = (y - pred.mu) / sigma
    return T.mean(resid * resid * 0.5 + T.log(sigma)) + HALF_LOG_2PI


@dataclass
class MixtureDistribution:
    """Uniform mixture of ``S`` categorical fields, shape ``S x C x positions...``."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim < 2:
            raise DimensionError(f"mixture needs at least S x C axes, got {self.probs.shape}")

    @property
    def num_components(self) -> int:
        return self.probs.shape[0]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]

    def mean(self) -> np.ndarray:
        return self.probs.mean(axis=0)


def mixture_cll(mix: MixtureDistribution, labels) -> float:
    """Negative log-likelihood of ``labels`` under the mixture, averaged over positions."""
    labels = np.asarray(labels)
    mean = mix.mean()
    if labels.shape != mean.shape[1:]:
        raise DimensionError(f"labels {labels.shape} do not match mixture positions {mean.shape[1:]}")
    if labels.size and (labels.min() < 0 or labels.max() >= mix.num_classes):
        raise DataError(f"labels must lie in [0, {mix.num_classes}), "
                        f"got range [{labels.min()}, {labels.max()}]")
    p = np.take_along_axis(mean, labels[None].astype(np.int64), axis=0)[0]
    return float(-np.mean(np.log(np.maximum(p, PROB_FLOOR))))


@dataclass
class HeadConfig:
    """How raw network outputs become predictions and discriminator inputs.

    ``channel_axis`` is the axis split into means and log-variances (1 for
    batched outputs).  ``sample_noise=False`` sets the reparameterization noise
    to zero, so sampled outputs equal the model mean.  ``disc_view`` selects
    what the discriminator sees of a sample: ``"raw"`` values or ``"softmax"``
    class probabilities over ``channel_axis``.
    """

    constant_sigma: float | None = None
    sample_noise: bool = True
    disc_view: str = "raw"
    channel_axis: int = 1

    def gaussian(self, raw: Tensor) -> GaussianPrediction:
        return split_statistics(raw, axis=self.channel_axis, constant_sigma=self.constant_sigma)

    def view(self, y: Tensor) -> Tensor:
        if self.disc_view == "softmax":
            return class_probabilities(y, axis=self.channel_axis)
        return y
