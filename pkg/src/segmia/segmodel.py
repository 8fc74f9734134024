"""Fully convolutional segmentation networks: training and inference."""

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from segmia.errors import DivergenceError
from segmia.nn.layers import Conv, Dropout, Relu, Softmax
from segmia.nn.losses import cross_entropy
from segmia.nn.network import Network, build_network, load_checkpoint, save_checkpoint
from segmia.nn.optim import dpsgd_step, estimate_clip_factors, sgd_step
from segmia.representation import mean_max_posterior, one_hot_labels
from segmia.seeding import derive_seed, rng_for


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 0.05
    momentum: float = 0.9
    dropout_ratio: float = 0.1
    optimizer: str = "sgd"
    noise_variance: float = 0.0
    clip_quantile: float = 0.9

    def __post_init__(self):
        if self.optimizer not in ("sgd", "dpsgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs/batch_size out of range")
        if self.optimizer == "dpsgd" and self.noise_variance < 0:
            raise ValueError("noise_variance must be non-negative")


def segmenter_layers(num_classes: int, dropout_ratio: float = 0.1, widths=(16, 32, 32)):
    """Conv stack ending in a per-pixel softmax; spatial size is preserved.

    A single dropout layer sits before the last convolution so a test-time
    stochastic pass can degrade exactly one feature map.
    """
    w1, w2, w3 = widths
    return (
        Conv(3, 3, w1, padding=1),
        Relu(),
        Conv(3, w1, w2, padding=1),
        Relu(),
        Conv(3, w2, w3, padding=1),
        Relu(),
        Dropout(dropout_ratio),
        Conv(3, w3, num_classes, padding=1),
        Softmax(),
    )


def narrow_segmenter_layers(num_classes: int, dropout_ratio: float = 0.1):
    """Alternative architecture for the independent-attacker setting."""
    return segmenter_layers(num_classes, dropout_ratio, widths=(16, 24, 24))


@dataclass
class SegModel:
    network: Network = field(repr=False)
    num_classes: int
    train_config: TrainConfig
    loss_trajectory: list = field(default_factory=list, repr=False)
    clip_factors: dict | None = None


def train_segmenter(scenes, num_classes: int, config: TrainConfig, seed: int, layers=None) -> SegModel:
    """Train on labeled scenes; returns the model with its loss trajectory."""
    if not scenes:
        raise ValueError("training set is empty")
    if layers is None:
        layers = segmenter_layers(num_classes, config.dropout_ratio)
    net = build_network(layers, derive_seed(seed, "init"))
    targets = [one_hot_labels(s.labels, num_classes) for s in scenes]
    images = [s.image for s in scenes]
    order_rng = rng_for(seed, "order")

    clip_factors = None
    if config.optimizer == "dpsgd":
        clip_factors = estimate_clip_factors(
            net, zip(images, targets), quantile=config.clip_quantile
        )

    velocity = None
    trajectory = []
    step = 0
    for epoch in range(config.epochs):
        perm = order_rng.permutation(len(scenes))
        epoch_loss = 0.0
        for start in range(0, len(scenes), config.batch_size):
            batch = perm[start : start + config.batch_size]
            per_example = []
            batch_loss = 0.0
            for idx in batch:
                trace = net.forward_trace(
                    images[idx],
                    stochastic=config.dropout_ratio > 0,
                    seed=derive_seed(seed, "dropout", epoch, int(idx)),
                )
                loss, out_grad = cross_entropy(trace.output, targets[idx])
                _, grads = net.backward(trace, out_grad)
                per_example.append(grads)
                batch_loss += loss
            if not np.isfinite(batch_loss):
                raise DivergenceError(f"non-finite loss at step {step}", step=step)
            if config.optimizer == "dpsgd":
                dpsgd_step(
                    net.params,
                    per_example,
                    clip_factors,
                    config.noise_variance,
                    config.learning_rate,
                    seed=derive_seed(seed, "noise", step),
                )
            else:
                mean = [
                    [np.mean([ex[i][j] for ex in per_example], axis=0) for j in range(len(g))]
                    for i, g in enumerate(net.params)
                ]
                velocity = sgd_step(
                    net.params, mean, config.learning_rate, config.momentum, velocity
                )
            epoch_loss += batch_loss
            step += 1
        trajectory.append(epoch_loss / len(scenes))
    return SegModel(
        network=net,
        num_classes=num_classes,
        train_config=config,
        loss_trajectory=trajectory,
        clip_factors=clip_factors,
    )


def predict_posterior(model: SegModel, image, stochastic_dropout_ratio=None, seed: int = 0):
    """Posterior map (H, W, C); optionally one stochastic dropout pass."""
    if stochastic_dropout_ratio is None:
        return model.network.forward(image)
    return model.network.forward(
        image, stochastic=True, seed=seed, dropout_override=float(stochastic_dropout_ratio)
    )


def predict_labels(model: SegModel, image) -> np.ndarray:
    # argmax takes the first maximum, so ties resolve to the lowest class id
    return predict_posterior(model, image).argmax(axis=-1).astype(np.int32)


def mean_iou(predicted, truth, num_classes: int) -> float:
    """Mean IoU over classes present in either map; absent classes are skipped."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValueError(f"shape mismatch {predicted.shape} vs {truth.shape}")
    ious = []
    for c in range(num_classes):
        p = predicted == c
        t = truth == c
        union = int((p | t).sum())
        if union == 0:
            continue
        ious.append(int((p & t).sum()) / union)
    if not ious:
        raise ValueError("no classes present in either map")
    return float(np.mean(ious))


def rank_by_confidence(model: SegModel, scenes):
    """Indices of ``scenes`` sorted by mean winning-class confidence, descending."""
    scores = np.array([mean_max_posterior(predict_posterior(model, s.image)) for s in scenes])
    return [int(i) for i in np.argsort(-scores, kind="stable")]


def save_segmodel(directory, model: SegModel) -> None:
    directory = Path(directory)
    meta = {
        "num_classes": model.num_classes,
        "train_config": asdict(model.train_config),
        "clip_factors": {str(k): v for k, v in model.clip_factors.items()}
        if model.clip_factors
        else None,
    }
    save_checkpoint(directory, model.network, meta)
    with open(directory / "loss_trajectory.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for i, loss in enumerate(model.loss_trajectory):
            writer.writerow([i, f"{loss:.9g}"])


def load_segmodel(directory) -> SegModel:
    directory = Path(directory)
    network, meta = load_checkpoint(directory)
    trajectory = []
    traj_path = directory / "loss_trajectory.csv"
    if traj_path.exists():
        with open(traj_path, newline="") as fh:
            for row in csv.DictReader(fh):
                trajectory.append(float(row["loss"]))
    clip = meta.get("clip_factors")
    return SegModel(
        network=network,
        num_classes=int(meta["num_classes"]),
        train_config=TrainConfig(**meta["train_config"]),
        loss_trajectory=trajectory,
        clip_factors={int(k): v for k, v in clip.items()} if clip else None,
    )
