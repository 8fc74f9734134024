"""Output and training defenses against membership inference.

Output defenses transform the posterior map per query (argmax, additive
Gaussian noise, a stochastic dropout inference pass). The DPSGD defense
lives at training time; here it only validates that the queried model was
actually trained that way.
"""

from dataclasses import dataclass

import numpy as np

from segmia.representation import validate_posterior
from segmia.segmodel import SegModel, predict_posterior

KINDS = ("none", "argmax", "gauss", "dropout", "dpsgd")


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = "none"
    variance: float = 0.0  # gauss: scale of the additive noise
    ratio: float = 0.0  # dropout: test-time dropout ratio
    noise_variance: float = 0.0  # dpsgd: training-time gradient noise

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown defense {self.kind!r}")
        if self.kind == "gauss" and self.variance < 0:
            raise ValueError("gauss variance must be non-negative")
        if self.kind == "dropout" and not 0.0 <= self.ratio < 1.0:
            raise ValueError("dropout ratio must be in [0, 1)")
        if self.kind == "dpsgd" and self.noise_variance < 0:
            raise ValueError("dpsgd noise_variance must be non-negative")

    @property
    def param(self) -> float | None:
        if self.kind == "gauss":
            return self.variance
        if self.kind == "dropout":
            return self.ratio
        if self.kind == "dpsgd":
            return self.noise_variance
        return None

    @property
    def tag(self) -> str:
        if self.param is None:
            return self.kind
        return f"{self.kind}_{self.param:g}"


def apply_argmax(posterior) -> np.ndarray:
    """One-hot of the winning class (ties resolve to the lowest class id)."""
    posterior = np.asarray(posterior)
    winners = posterior.argmax(axis=-1)
    out = np.zeros_like(posterior, dtype=np.float32)
    np.put_along_axis(out, winners[..., None], 1.0, axis=-1)
    return out


def apply_gauss(posterior, variance: float, seed: int) -> np.ndarray:
    """Additive zero-mean Gaussian noise, clamped and renormalized.

    The parameter feeds the draw directly as its scale: noise at 0.1 moves
    entries by about 0.1, small enough to keep argmax decisions stable on
    confident locations. Negative entries clamp to zero; each location is
    rescaled to sum to one, falling back to the uniform distribution where
    everything clamped away.
    """
    posterior = np.asarray(posterior, dtype=np.float32)
    if variance < 0:
        raise ValueError("variance must be non-negative")
    if variance == 0:
        return posterior.copy()
    rng = np.random.default_rng(seed)
    noisy = posterior + rng.normal(0.0, variance, size=posterior.shape)
    noisy = np.maximum(noisy, 0.0)
    totals = noisy.sum(axis=-1, keepdims=True)
    c = posterior.shape[-1]
    uniform = np.full_like(posterior, 1.0 / c)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(totals > 0, noisy / totals, uniform)
    return out.astype(np.float32)


def defended_posterior(model: SegModel, image, defense: DefenseConfig, seed: int = 0) -> np.ndarray:
    """One defended query of the model on ``image``.

    Stochastic defenses must be called with a fresh seed per query; the
    caller owns seed derivation.
    """
    if defense.kind == "dpsgd" and model.train_config.optimizer != "dpsgd":
        raise ValueError("dpsgd defense requires a model trained with the dpsgd optimizer")
    if defense.kind == "dropout":
        p = predict_posterior(model, image, stochastic_dropout_ratio=defense.ratio, seed=seed)
        return validate_posterior(p)
    p = predict_posterior(model, image)
    if defense.kind == "argmax":
        return apply_argmax(p)
    if defense.kind == "gauss":
        return apply_gauss(p, defense.variance, seed)
    return p
