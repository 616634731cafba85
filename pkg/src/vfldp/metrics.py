"""Evaluation metrics for the experiment tasks."""
import numpy as np

from .data import BINARY
from .errors import ConfigError, ShapeError


def compute_metrics(task, predictions, targets):
    """Metric values for link-space ``predictions``.

    Binary tasks report ``accuracy`` with outputs >= 0.5 counted as positive.
    Regression tasks report ``mse`` averaged over rows and output columns.
    """
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if p.ndim == 1:
        p = p[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if p.shape != y.shape:
        raise ShapeError(f"predictions {p.shape} and targets {y.shape} are not aligned")
    if p.shape[0] == 0:
        raise ConfigError("cannot compute metrics on an empty test set")
    if task == BINARY:
        hits = (p >= 0.5) == (y >= 0.5)
        return {"accuracy": float(np.mean(hits))}
    return {"mse": float(np.mean((p - y) ** 2))}


def metric_name(task):
    return "test_accuracy" if task == BINARY else "test_mse"
