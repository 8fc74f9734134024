"""Shared tiny fixtures; kept small so the unit suite stays fast."""

import numpy as np
import pytest

from segmia.scenes import ClassStyle, SceneConfig, generate_dataset
from segmia.segmodel import TrainConfig, train_segmenter

TINY_PALETTE = (
    ClassStyle(color=(0.30, 0.30, 0.30), noise_scale=1.0),
    ClassStyle(color=(0.55, 0.65, 0.85), noise_scale=0.5),
    ClassStyle(color=(0.60, 0.28, 0.22), noise_scale=1.2),
)


@pytest.fixture(scope="session")
def tiny_scene_config():
    return SceneConfig(
        height=16,
        width=16,
        num_classes=3,
        objects_min=1,
        objects_max=2,
        object_min_half=2,
        object_max_half=4,
        texture_noise_sigma=0.10,
        palette=TINY_PALETTE,
    )


@pytest.fixture(scope="session")
def tiny_scenes(tiny_scene_config):
    return generate_dataset(tiny_scene_config, 8, seed=101)


@pytest.fixture(scope="session")
def tiny_model(tiny_scenes):
    config = TrainConfig(epochs=4, batch_size=4, learning_rate=0.06, dropout_ratio=0.1)
    return train_segmenter(tiny_scenes, num_classes=3, config=config, seed=7)


def make_posterior(rng, h, w, c, sharp_true=None, labels=None):
    """Random posterior map; optionally concentrated on the true class."""
    logits = rng.normal(size=(h, w, c))
    p = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    if sharp_true is not None:
        onehot = np.zeros((h, w, c))
        idx = np.indices((h, w))
        onehot[(*idx, labels)] = 1.0
        p = sharp_true * onehot + (1 - sharp_true) * p
        p /= p.sum(-1, keepdims=True)
    return p.astype(np.float32)
