"""Training losses and their input gradients."""

import math

import numpy as np

from segmia.errors import NotOneHotError, ShapeError

# clamp floor for log arguments; also bounds the structured loss map
EPSILON = 1e-7
MAX_LOG_LOSS = -math.log(EPSILON)


def require_one_hot(target, what="target"):
    t = np.asarray(target)
    if not (((t == 0.0) | (t == 1.0)).all() and (t.sum(axis=-1) == 1.0).all()):
        raise NotOneHotError(f"{what} is not one-hot over the class axis")
    return t


def cross_entropy(prediction, target):
    """Mean over locations of -log(max(p_true, EPSILON)).

    ``prediction`` holds class probabilities on the last axis; ``target`` is
    one-hot with the same shape. Returns (loss, gradient wrt prediction).
    The gradient is zero wherever the clamp is active.
    """
    prediction = np.asarray(prediction)
    target = require_one_hot(target)
    if prediction.shape != target.shape:
        raise ShapeError(
            f"prediction shape {prediction.shape} != target shape {target.shape}"
        )
    locations = int(np.prod(prediction.shape[:-1], dtype=np.int64)) or 1
    p_true = (prediction.astype(np.float64) * target).sum(axis=-1)
    clamped = np.maximum(p_true, EPSILON)
    loss = float(-np.log(clamped).mean())
    scale = np.where(p_true > EPSILON, -1.0 / clamped, 0.0) / locations
    grad = (target * scale[..., None]).astype(prediction.dtype)
    return loss, grad


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def binary_cross_entropy_with_logit(logit, label: float):
    """Stable BCE on a single logit. Returns (loss, gradient wrt logit)."""
    z = float(np.asarray(logit).reshape(()))
    loss = max(z, 0.0) - label * z + math.log1p(math.exp(-abs(z)))
    grad = float(sigmoid(z)) - label
    return loss, grad
