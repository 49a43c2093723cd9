"""Evaluation metrics: oracle top-k%, mIoU, calibration tables, mode coverage."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DimensionError, UsageError


@dataclass
class OracleResult:
    value: float
    k: float
    per_input: np.ndarray
    scores: np.ndarray


def top_k_percent(scores, k: float, higher_is_better: bool = True) -> OracleResult:
    """Mean of the best ``ceil(k * S)`` of ``S`` per-sample scores, averaged over inputs.

    ``scores`` is ``inputs x S`` (a 1-D array is one input).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 1:
        scores = scores[None]
    if scores.ndim != 2 or scores.size == 0:
        raise UsageError(f"top_k_percent needs a non-empty inputs x samples array, got shape {scores.shape}")
    if not 0.0 < k <= 1.0:
        raise UsageError(f"k must lie in (0, 1], got {k}")
    n_best = max(1, math.ceil(k * scores.shape[1] - 1e-9))
    ordered = np.sort(scores, axis=1)
    if higher_is_better:
        ordered = ordered[:, ::-1]
    per_input = ordered[:, :n_best].mean(axis=1)
    return OracleResult(float(per_input.mean()), k, per_input, scores)


@dataclass
class ConfusionAccumulator:
    num_classes: int
    tp: np.ndarray = field(default=None)
    fp: np.ndarray = field(default=None)
    fn: np.ndarray = field(default=None)

    def __post_init__(self):
        for name in ("tp", "fp", "fn"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.num_classes, dtype=np.int64))

    def update(self, pred, gt, ignore_label: int | None = None) -> "ConfusionAccumulator":
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
        keep = np.ones(gt.shape, bool) if ignore_label is None else gt != ignore_label
        p, g = pred[keep].astype(np.int64), gt[keep].astype(np.int64)
        for arr, what in ((p, "prediction"), (g, "ground truth")):
            if arr.size and (arr.min() < 0 or arr.max() >= self.num_classes):
                raise DataError(f"{what} labels must lie in [0, {self.num_classes}), "
                                f"got range [{arr.min()}, {arr.max()}]")
        n = self.num_classes
        conf = np.bincount(g * n + p, minlength=n * n).reshape(n, n)
        diag = np.diag(conf)
        self.tp += diag
        self.fp += conf.sum(axis=0) - diag
        self.fn += conf.sum(axis=1) - diag
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        return ConfusionAccumulator(self.num_classes, self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def iou(self) -> np.ndarray:
        denom = self.tp + self.fp + self.fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, self.tp / np.maximum(denom, 1), np.nan)

    def miou(self) -> float:
        iou = self.iou()
        present = ~np.isnan(iou)
        return float(iou[present].mean()) if present.any() else float("nan")


def miou(pred_labels, gt_labels, num_classes: int, ignore_label: int | None = None) -> float:
    """Mean IoU over classes that occur in the prediction or the ground truth."""
    return ConfusionAccumulator(num_classes).update(pred_labels, gt_labels, ignore_label).miou()


@dataclass
class CalibrationTable:
    edges: np.ndarray
    confidence: np.ndarray
    frequency: np.ndarray
    count: np.ndarray

    @property
    def total(self) -> int:
        return int(self.count.sum())

    @property
    def ece(self) -> float:
        used = self.count > 0
        w = self.count[used] / self.count.sum()
        return float(np.sum(w * np.abs(self.confidence[used] - self.frequency[used])))

    def rows(self):
        for b in range(len(self.count)):
            yield b, self.confidence[b], self.frequency[b], int(self.count[b])


def calibration(mean_probs, labels, n_bins: int = 10, class_axis: int = 0) -> CalibrationTable:
    """Reliability table over every (position, class) probability.

    A probability counts as correct when its class is the label at that
    position.  Bins are uniform on [0, 1]; empty bins report NaN.
    """
    if n_bins < 2:
        raise UsageError(f"n_bins must be >= 2, got {n_bins}")
    probs = np.moveaxis(np.asarray(mean_probs, dtype=np.float64), class_axis, 0)
    labels = np.asarray(labels)
    if probs.shape[1:] != labels.shape:
        raise DimensionError(f"probabilities {probs.shape} do not match labels {labels.shape}")
    c = probs.shape[0]
    p = probs.reshape(c, -1)
    correct = (np.arange(c)[:, None] == labels.reshape(1, -1)).astype(np.float64)
    bins = np.minimum((p * n_bins).astype(np.int64), n_bins - 1).reshape(-1)
    count = np.bincount(bins, minlength=n_bins)
    conf_sum = np.bincount(bins, weights=p.reshape(-1), minlength=n_bins)
    hit_sum = np.bincount(bins, weights=correct.reshape(-1), minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        confidence = np.where(count > 0, conf_sum / np.maximum(count, 1), np.nan)
        frequency = np.where(count > 0, hit_sum / np.maximum(count, 1), np.nan)
    return CalibrationTable(np.linspace(0.0, 1.0, n_bins + 1), confidence, frequency, count)


def mode_coverage(model_means, modes, tol: float) -> np.ndarray:
    """For each mode, count the models whose probe-set mean lies within ``tol``."""
    model_means = np.asarray(model_means, dtype=np.float64).reshape(-1)
    if model_means.size == 0:
        raise UsageError("mode_coverage needs at least one model")
    modes = np.asarray(modes, dtype=np.float64).reshape(-1)
    return (np.abs(model_means[None, :] - modes[:, None]) <= tol).sum(axis=1)
