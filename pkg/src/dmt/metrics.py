"""Evaluation metrics, EMA tracking and the baseline epoch rule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

IGNORE_INDEX = 255


class UndefinedMetricError(Exception):
    pass


def accuracy(predictions: Sequence[int] | np.ndarray, ground_truth) -> float:
    predictions = np.asarray(predictions)
    ground_truth = np.asarray(ground_truth)
    if predictions.shape != ground_truth.shape:
        raise ValueError(
            f"length mismatch: {predictions.shape} predictions vs "
            f"{ground_truth.shape} labels"
        )
    if predictions.size == 0:
        raise ValueError("cannot score an empty batch")
    return float(np.mean(predictions == ground_truth))


def fine_grained_score(prob_predictions: np.ndarray, ground_truth) -> float:
    """Mean assigned probability of the true class, zero when argmax is wrong.

    A correct prediction counts as how confident it was, not as 1, which
    separates models a 200-sample validation set cannot tell apart.
    """
    probs = np.asarray(prob_predictions, dtype=np.float64)
    gt = np.asarray(ground_truth, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != gt.size:
        raise ValueError("predictions and labels must align")
    pred = np.argmax(probs, axis=1)
    p_true = probs[np.arange(gt.size), gt]
    return float(np.mean(np.where(pred == gt, p_true, 0.0)))


def confusion_matrix(
    predictions: np.ndarray,
    ground_truth: np.ndarray,
    n_classes: int,
    ignore_index: int = IGNORE_INDEX,
) -> np.ndarray:
    """(C, C) counts, rows ground truth, columns prediction; ignored pixels excluded."""
    predictions = np.asarray(predictions).reshape(-1)
    ground_truth = np.asarray(ground_truth).reshape(-1)
    if predictions.shape != ground_truth.shape:
        raise ValueError("predictions and ground truth must align")
    scored = ground_truth != ignore_index
    p = predictions[scored].astype(np.int64)
    g = ground_truth[scored].astype(np.int64)
    if np.any(p < 0) or np.any(p >= n_classes) or np.any(g < 0) or np.any(g >= n_classes):
        raise ValueError("class index out of range")
    return np.bincount(g * n_classes + p, minlength=n_classes**2).reshape(
        n_classes, n_classes
    )


def per_class_iou(cm: np.ndarray) -> np.ndarray:
    """IoU per class; NaN where the class appears in neither rows nor columns."""
    cm = np.asarray(cm, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {cm.shape}")
    tp = np.diag(cm)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / denom, np.nan)


def mean_iou(cm: np.ndarray, skip_absent: bool = True) -> float:
    """Mean per-class IoU; zero-denominator classes are excluded by default."""
    iou = per_class_iou(cm)
    if np.all(np.isnan(iou)):
        raise UndefinedMetricError("confusion matrix has no scored samples")
    if skip_absent:
        return float(np.nanmean(iou))
    return float(np.mean(np.nan_to_num(iou, nan=0.0)))


@dataclass
class EmaState:
    """Exponential moving average of a parameter dict. Single-writer."""

    shadow: dict
    decay: float

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError(f"decay must be in [0, 1], got {self.decay}")

    @classmethod
    def from_parameters(cls, parameters: Mapping, decay: float = 0.999) -> "EmaState":
        return cls(shadow={k: _clone(v) for k, v in parameters.items()}, decay=decay)


def _clone(v):
    return v.clone() if hasattr(v, "clone") else np.array(v, copy=True)


def ema_update(ema: EmaState, current: Mapping) -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * current, elementwise."""
    if set(ema.shadow) != set(current):
        raise ValueError("parameter names do not match the tracked model")
    for k, v in current.items():
        if tuple(ema.shadow[k].shape) != tuple(v.shape):
            raise ValueError(f"shape mismatch for {k!r}")
        ema.shadow[k] = ema.decay * ema.shadow[k] + (1.0 - ema.decay) * v
    return ema


def baseline_epochs(labeled_ratio: float, oracle_epochs: int) -> int:
    """Supervised-baseline budget: round(sqrt(1/ratio) * oracle epochs).

    A compromise between keeping the epoch count and keeping the step
    count when only a fraction of the data carries labels. Rounding is
    half-up.
    """
    if labeled_ratio <= 0 or labeled_ratio > 1:
        raise ValueError(f"labeled_ratio must be in (0, 1], got {labeled_ratio}")
    if oracle_epochs <= 0:
        raise ValueError(f"oracle epochs must be positive, got {oracle_epochs}")
    return int(math.floor(math.sqrt(1.0 / labeled_ratio) * oracle_epochs + 0.5))
