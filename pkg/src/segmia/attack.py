"""Per-patch membership inference against segmentation outputs.

A patch attacker is a small binary classifier trained on crops of shadow
model outputs: crops of member images labeled 1, non-member crops 0.
At attack time a set of patches is selected from the victim's output map
and the image-level membership score is the mean of the per-patch scores.
"""

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from segmia.errors import AllPatchesRejectedError, DivergenceError, ShapeError
from segmia.nn.layers import Conv, Dense, GlobalAvgPool, Relu
from segmia.nn.losses import binary_cross_entropy_with_logit, sigmoid
from segmia.nn.network import Network, build_network, load_checkpoint, save_checkpoint
from segmia.nn.optim import sgd_step
from segmia.representation import (
    PatchRect,
    concat_representation,
    crop,
    mean_max_posterior,
    normalize_loss_map,
    structured_loss_map,
)
from segmia.seeding import derive_seed, rng_for

REPRESENTATIONS = ("concat", "slm")


@dataclass(frozen=True)
class PatchSelector:
    """How attack-time patches are chosen from an output map.

    kinds: "sliding" (grid with the given step, final row/column clamped to
    the edge), "random" (uniform windows), "rejection" (uniform windows,
    rejecting any whose mean true-class confidence exceeds tau).
    """

    kind: str = "sliding"
    step: int = 8
    count: int = 10
    tau: float = 0.99
    max_attempts_factor: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("sliding", "random", "rejection"):
            raise ValueError(f"unknown selector kind {self.kind!r}")
        if self.kind == "sliding" and self.step < 1:
            raise ValueError("sliding step must be positive")
        if self.kind in ("random", "rejection") and self.count < 1:
            raise ValueError("selector count must be positive")
        if self.kind == "rejection" and not (0.0 < self.tau <= 1.0 and self.max_attempts_factor >= 1):
            raise ValueError("rejection needs tau in (0, 1] and a positive attempt factor")


def sliding_rects(height, width, patch_height, patch_width, step):
    """Grid of patch windows; the last row/column is clamped inside bounds."""
    if patch_height > height or patch_width > width:
        raise ShapeError(f"patch {patch_height}x{patch_width} exceeds map {height}x{width}")
    tops = list(range(0, height - patch_height + 1, step))
    if tops[-1] != height - patch_height:
        tops.append(height - patch_height)
    lefts = list(range(0, width - patch_width + 1, step))
    if lefts[-1] != width - patch_width:
        lefts.append(width - patch_width)
    return [PatchRect(t, l, patch_height, patch_width) for t in tops for l in lefts]


def mean_true_confidence(posterior, target, rect: PatchRect) -> float:
    """Mean probability assigned to the true class inside the window."""
    p = crop(posterior, rect)
    t = crop(target, rect)
    return float((p.astype(np.float64) * t).sum(axis=-1).mean())


def _random_rect(rng, height, width, patch_height, patch_width):
    top = int(rng.integers(0, height - patch_height + 1))
    left = int(rng.integers(0, width - patch_width + 1))
    return PatchRect(top, left, patch_height, patch_width)


def select_patches(selector: PatchSelector, posterior, target, patch_height, patch_width):
    """Patch windows for one output map; deterministic given selector.seed.

    Raises AllPatchesRejectedError when the rejection filter discards every
    candidate within its attempt budget.
    """
    height, width = np.asarray(posterior).shape[:2]
    if patch_height > height or patch_width > width:
        raise ShapeError(f"patch {patch_height}x{patch_width} exceeds map {height}x{width}")
    if selector.kind == "sliding":
        return sliding_rects(height, width, patch_height, patch_width, selector.step)
    rng = np.random.default_rng(selector.seed)
    if selector.kind == "random":
        return [_random_rect(rng, height, width, patch_height, patch_width) for _ in range(selector.count)]
    accepted = []
    budget = selector.max_attempts_factor * selector.count
    for _ in range(budget):
        rect = _random_rect(rng, height, width, patch_height, patch_width)
        if mean_true_confidence(posterior, target, rect) <= selector.tau:
            accepted.append(rect)
            if len(accepted) == selector.count:
                break
    if not accepted:
        raise AllPatchesRejectedError(
            f"rejection selector discarded all {budget} candidates", attempts=budget
        )
    return accepted


def build_representation(posterior, target, kind: str) -> np.ndarray:
    if kind == "concat":
        return concat_representation(posterior, target)
    if kind == "slm":
        return normalize_loss_map(structured_loss_map(posterior, target))
    raise ValueError(f"unknown representation {kind!r}")


def attacker_layers(in_channels: int, patch_height: int, patch_width: int):
    """Conv stack over a patch, pooled to a single membership logit."""
    k, p = (3, 1) if min(patch_height, patch_width) >= 3 else (1, 0)
    return (
        Conv(k, in_channels, 8, padding=p),
        Relu(),
        Conv(k, 8, 16, padding=p),
        Relu(),
        Conv(k, 16, 16, padding=p),
        Relu(),
        GlobalAvgPool(),
        Dense(16, 1),
    )


@dataclass(frozen=True)
class AttackTrainConfig:
    representation: str = "slm"
    patch_height: int = 16
    patch_width: int = 16
    epochs: int = 20
    learning_rate: float = 0.08
    momentum: float = 0.9
    patches_per_image: int = 4

    def __post_init__(self):
        if self.representation not in REPRESENTATIONS:
            raise ValueError(f"unknown representation {self.representation!r}")
        if self.patch_height < 1 or self.patch_width < 1:
            raise ValueError("patch dims must be positive")
        if self.epochs < 0 or self.patches_per_image < 1:
            raise ValueError("epochs/patches_per_image out of range")


@dataclass
class PatchAttacker:
    network: Network = field(repr=False)
    representation: str
    patch_height: int
    patch_width: int
    num_classes: int
    # per-channel standardization fitted on the training maps; without it a
    # confident shadow model yields inputs of order 1e-3 and training stalls
    feature_shift: np.ndarray = field(default=None, repr=False)
    feature_scale: np.ndarray = field(default=None, repr=False)
    loss_trajectory: list = field(default_factory=list, repr=False)


def _rep_channels(kind: str, num_classes: int) -> int:
    return 2 * num_classes if kind == "concat" else 1


def _standardize(rep, shift, scale):
    if shift is None:
        return rep
    return ((rep - shift) / scale).astype(rep.dtype)


def _fit_standardizer(maps_by_label):
    flat = np.concatenate(
        [r.reshape(-1, r.shape[-1]) for maps in maps_by_label.values() for r in maps]
    ).astype(np.float64)
    shift = flat.mean(axis=0)
    scale = np.maximum(flat.std(axis=0), 1e-6)
    return shift.astype(np.float32), scale.astype(np.float32)


def train_patch_attacker(member_maps, nonmember_maps, num_classes, config: AttackTrainConfig, seed: int) -> PatchAttacker:
    """Train on (posterior, one-hot target) pairs from a shadow model.

    ``member_maps`` come from shadow training images (label 1),
    ``nonmember_maps`` from held-out images (label 0). Patches are cropped
    uniformly at random each epoch.
    """
    if not member_maps or not nonmember_maps:
        raise ValueError("need both member and non-member maps")
    ph, pw = config.patch_height, config.patch_width
    reps = {
        1: [build_representation(p, t, config.representation) for p, t in member_maps],
        0: [build_representation(p, t, config.representation) for p, t in nonmember_maps],
    }
    for label, maps in reps.items():
        for r in maps:
            if r.shape[0] < ph or r.shape[1] < pw:
                raise ShapeError(f"map {r.shape} smaller than patch {ph}x{pw}")
    shift, scale = _fit_standardizer(reps)
    reps = {
        label: [_standardize(r, shift, scale) for r in maps] for label, maps in reps.items()
    }
    net = build_network(
        attacker_layers(_rep_channels(config.representation, num_classes), ph, pw),
        derive_seed(seed, "init"),
    )
    rng = rng_for(seed, "patches")
    velocity = None
    trajectory = []
    pairs = max(len(member_maps), len(nonmember_maps))
    step = 0
    for epoch in range(config.epochs):
        order = {label: rng.permutation(len(maps)) for label, maps in reps.items()}
        epoch_loss = 0.0
        epoch_patches = 0
        for k in range(pairs):
            batch = []
            for label in (1, 0):
                maps = reps[label]
                rep = maps[order[label][k % len(maps)]]
                for _ in range(config.patches_per_image):
                    rect = _random_rect(rng, rep.shape[0], rep.shape[1], ph, pw)
                    batch.append((crop(rep, rect), float(label)))
            grads_sum = None
            for x, label in batch:
                trace = net.forward_trace(x)
                loss, dz = binary_cross_entropy_with_logit(trace.output, label)
                _, grads = net.backward(trace, np.array([dz], dtype=np.float32))
                if grads_sum is None:
                    grads_sum = grads
                else:
                    for gi, group in enumerate(grads):
                        for pi, g in enumerate(group):
                            grads_sum[gi][pi] += g
                epoch_loss += loss
                epoch_patches += 1
            if not np.isfinite(epoch_loss):
                raise DivergenceError(f"non-finite attacker loss at step {step}", step=step)
            mean = [[g / len(batch) for g in group] for group in grads_sum]
            velocity = sgd_step(net.params, mean, config.learning_rate, config.momentum, velocity)
            step += 1
        trajectory.append(epoch_loss / max(epoch_patches, 1))
    return PatchAttacker(
        network=net,
        representation=config.representation,
        patch_height=ph,
        patch_width=pw,
        num_classes=num_classes,
        feature_shift=shift,
        feature_scale=scale,
        loss_trajectory=trajectory,
    )


def score_patch(attacker: PatchAttacker, posterior_patch, target_patch) -> float:
    """Membership score in (0, 1) for a single cropped patch pair."""
    rep = build_representation(posterior_patch, target_patch, attacker.representation)
    if rep.shape[:2] != (attacker.patch_height, attacker.patch_width):
        raise ShapeError(
            f"patch {rep.shape[:2]} does not match attacker {attacker.patch_height}x{attacker.patch_width}"
        )
    rep = _standardize(rep, attacker.feature_shift, attacker.feature_scale)
    logit = attacker.network.forward(rep)
    return float(sigmoid(float(logit[0])))


@dataclass
class MembershipVerdict:
    score: float
    patch_scores: list
    rects: list
    fallback: bool = False  # rejection selector failed; random patches used


def infer_membership(attacker: PatchAttacker, posterior, target, selector: PatchSelector) -> MembershipVerdict:
    """Image-level membership score: mean of patch scores (Eq. of the method).

    When the rejection selector discards everything, falls back to the
    random selector with the same seed and flags the verdict.
    """
    ph, pw = attacker.patch_height, attacker.patch_width
    fallback = False
    try:
        rects = select_patches(selector, posterior, target, ph, pw)
    except AllPatchesRejectedError:
        rects = select_patches(
            dataclasses.replace(selector, kind="random"), posterior, target, ph, pw
        )
        fallback = True
    rep = build_representation(posterior, target, attacker.representation)
    rep = _standardize(rep, attacker.feature_shift, attacker.feature_scale)
    scores = []
    for rect in rects:
        logit = attacker.network.forward(crop(rep, rect))
        scores.append(float(sigmoid(float(logit[0]))))
    return MembershipVerdict(
        score=float(np.mean(scores)), patch_scores=scores, rects=rects, fallback=fallback
    )


def baseline_mean_confidence(posterior) -> float:
    """Mean winning-class confidence; higher suggests membership."""
    return mean_max_posterior(posterior)


def baseline_mean_loss(posterior, target) -> float:
    """Mean per-pixel true-class loss; negated so higher means member."""
    return -float(structured_loss_map(posterior, target).mean())


def pixel_attacker_config(epochs=12, learning_rate=0.08, patches_per_image=32) -> AttackTrainConfig:
    return AttackTrainConfig(
        representation="concat",
        patch_height=1,
        patch_width=1,
        epochs=epochs,
        learning_rate=learning_rate,
        patches_per_image=patches_per_image,
    )


def pixel_score_map(attacker: PatchAttacker, posterior, target) -> np.ndarray:
    """All per-pixel scores of a 1x1 attacker in one pass.

    The 1x1 conv stack is pointwise, so the whole map can be pushed through
    the convolutions at once and the dense head applied per location.
    """
    if (attacker.patch_height, attacker.patch_width) != (1, 1):
        raise ShapeError("pixel scoring requires a 1x1 patch attacker")
    net = attacker.network
    x = build_representation(posterior, target, attacker.representation)
    x = _standardize(x, attacker.feature_shift, attacker.feature_scale)
    for layer, params in zip(net.layers, net.params):
        if isinstance(layer, GlobalAvgPool):
            break
        x, _ = layer.forward(x, params)
    w, b = net.params[-1]
    logits = x @ w.T + b
    return sigmoid(logits[..., 0]).astype(np.float64)


def baseline_pixel_attacker(attacker: PatchAttacker, posterior, target) -> float:
    """Image score of the per-pixel attacker: mean over all pixel scores."""
    return float(pixel_score_map(attacker, posterior, target).mean())


def save_attacker(directory, attacker: PatchAttacker) -> None:
    meta = {
        "representation": attacker.representation,
        "patch_height": attacker.patch_height,
        "patch_width": attacker.patch_width,
        "num_classes": attacker.num_classes,
        "feature_shift": [float(v) for v in attacker.feature_shift]
        if attacker.feature_shift is not None
        else None,
        "feature_scale": [float(v) for v in attacker.feature_scale]
        if attacker.feature_scale is not None
        else None,
        "loss_trajectory": attacker.loss_trajectory,
    }
    save_checkpoint(directory, attacker.network, meta)


def load_attacker(directory) -> PatchAttacker:
    network, meta = load_checkpoint(directory)
    shift = meta.get("feature_shift")
    scale = meta.get("feature_scale")
    return PatchAttacker(
        network=network,
        representation=meta["representation"],
        patch_height=int(meta["patch_height"]),
        patch_width=int(meta["patch_width"]),
        num_classes=int(meta["num_classes"]),
        feature_shift=np.array(shift, dtype=np.float32) if shift is not None else None,
        feature_scale=np.array(scale, dtype=np.float32) if scale is not None else None,
        loss_trajectory=list(meta.get("loss_trajectory", [])),
    )
