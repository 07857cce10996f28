"""
Classification metrics over integer class ids.
"""

from typing import Tuple

import numpy as np

from spikinghan.errors import ConfigError, ShapeError


def predict(y_hat: np.ndarray) -> np.ndarray:
    """Argmax per row; ties go to the lowest class id (an all-zero row is class 0)."""
    y_hat = np.asarray(y_hat)
    if y_hat.ndim != 2:
        raise ShapeError("predict expects an n x d_out matrix", y_hat.shape)
    return np.argmax(y_hat, axis=1).astype(np.int64)


def confusion_matrix(predictions: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    """
    Rows are true classes, columns predicted classes.

    Raises:
        ConfigError: empty input, unequal lengths or ids outside [0, num_classes).
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if predictions.size == 0:
        raise ConfigError("Cannot score an empty set of predictions")
    if predictions.shape != truth.shape:
        raise ConfigError(f"Predictions and truth differ in length: {predictions.shape} vs {truth.shape}")
    for name, ids in (("prediction", predictions), ("label", truth)):
        if ids.min() < 0 or ids.max() >= num_classes:
            raise ConfigError(f"A {name} lies outside [0, {num_classes})")

    matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(matrix, (truth, predictions), 1)
    return matrix


def per_class_f1(matrix: np.ndarray) -> np.ndarray:
    """F1 = 2TP / (2TP + FP + FN) per class; 0 for a class absent from predictions and truth."""
    tp = np.diag(matrix).astype(np.float64)
    fp = matrix.sum(axis=0) - np.diag(matrix)
    fn = matrix.sum(axis=1) - np.diag(matrix)
    denominator = 2 * tp + fp + fn
    return np.where(denominator > 0, 2 * tp / np.where(denominator > 0, denominator, 1), 0.0)


def f1_scores(predictions: np.ndarray, truth: np.ndarray, num_classes: int) -> Tuple[float, float]:
    """
    Micro-F1 from pooled counts and Macro-F1 as the unweighted mean of per-class F1.

    For single-label multiclass data Micro-F1 equals accuracy.
    """
    matrix = confusion_matrix(predictions, truth, num_classes)
    tp = int(np.trace(matrix))
    errors = int(matrix.sum()) - tp
    micro = 2 * tp / (2 * tp + 2 * errors)
    macro = float(np.mean(per_class_f1(matrix)))
    return float(micro), macro
