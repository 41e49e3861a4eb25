"""Bounded regression losses."""
import math

import numpy as np

from src.exceptions import InvalidInputError


def clipped_squared_loss(prediction: float, target: float) -> float:
    """Squared error clipped at 1, so every loss lies in [0, 1]."""
    if not (math.isfinite(prediction) and math.isfinite(target)):
        raise InvalidInputError(f"loss needs finite inputs, got prediction={prediction}, target={target}")
    return min((prediction - target) ** 2, 1.0)


def squared_error(prediction: float, target: float) -> float:
    """Unclipped squared error, used for MSE reporting."""
    if not (math.isfinite(prediction) and math.isfinite(target)):
        raise InvalidInputError(f"loss needs finite inputs, got prediction={prediction}, target={target}")
    return (prediction - target) ** 2


def clipped_squared_losses(predictions: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorised :func:`clipped_squared_loss`; broadcasts over leading axes."""
    predictions = np.asarray(predictions, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if not (np.all(np.isfinite(predictions)) and np.all(np.isfinite(targets))):
        raise InvalidInputError("loss needs finite predictions and targets")
    return np.minimum((predictions - targets) ** 2, 1.0)
