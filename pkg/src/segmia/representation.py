"""Attack input representations built from posterior and label maps.

Two encodings of (posterior P, one-hot ground truth Y), both (H, W, *):

* concatenation: channels [0, C) are P, channels [C, 2C) are Y;
* structured loss map: per-location -log(max(P[true class], EPSILON)),
  a single channel bounded by -log(EPSILON).
"""

from dataclasses import dataclass

import numpy as np

from segmia.errors import ShapeError
from segmia.nn.losses import EPSILON, MAX_LOG_LOSS, require_one_hot


@dataclass(frozen=True)
class PatchRect:
    """Axis-aligned crop window in (row, col) coordinates."""

    top: int
    left: int
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.top < 0 or self.left < 0:
            raise ValueError(f"invalid rect {self}")

    def check_within(self, h, w):
        if self.top + self.height > h or self.left + self.width > w:
            raise ShapeError(f"rect {self} exceeds bounds ({h}, {w})")


def crop(arr, rect: PatchRect) -> np.ndarray:
    """Copy of the window; mutating the result never touches the source."""
    arr = np.asarray(arr)
    rect.check_within(arr.shape[0], arr.shape[1])
    return arr[rect.top : rect.top + rect.height, rect.left : rect.left + rect.width].copy()


def one_hot_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels outside [0, {num_classes})")
    out = np.zeros(labels.shape + (num_classes,), dtype=np.float32)
    for c in range(num_classes):
        out[..., c] = labels == c
    return out


def validate_posterior(p, tol=1e-4):
    p = np.asarray(p)
    if p.ndim != 3:
        raise ShapeError(f"posterior must be (H, W, C), got {p.shape}")
    if p.min() < -tol or np.abs(p.sum(axis=-1) - 1.0).max() > tol:
        raise ValueError("posterior rows are not probability distributions")
    return p


def concat_representation(posterior, target) -> np.ndarray:
    posterior = np.asarray(posterior, dtype=np.float32)
    target = require_one_hot(target)
    if posterior.shape != target.shape:
        raise ShapeError(f"posterior {posterior.shape} vs target {target.shape}")
    return np.concatenate([posterior, target.astype(np.float32)], axis=-1)


def structured_loss_map(posterior, target) -> np.ndarray:
    """Per-location cross entropy of the true class, clamped at EPSILON."""
    posterior = np.asarray(posterior, dtype=np.float32)
    target = require_one_hot(target)
    if posterior.shape != target.shape:
        raise ShapeError(f"posterior {posterior.shape} vs target {target.shape}")
    p_true = (posterior.astype(np.float64) * target).sum(axis=-1)
    slm = -np.log(np.maximum(p_true, EPSILON))
    return slm.astype(np.float32)[..., None]


def normalize_loss_map(slm) -> np.ndarray:
    """Scale a structured loss map into [0, 1] by its fixed upper bound."""
    return (np.asarray(slm, dtype=np.float32) / np.float32(MAX_LOG_LOSS)).astype(np.float32)


def mean_max_posterior(posterior) -> float:
    """Mean over locations of the winning-class probability."""
    posterior = np.asarray(posterior)
    return float(posterior.max(axis=-1).mean())
