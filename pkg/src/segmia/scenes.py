"""Synthetic layered scenes with pixel-exact segmentation labels.

A scene is a horizon split (sky above, ground below) with rectangles and
ellipses composited near the horizon; later objects occlude earlier ones.
Geometry and texture draw from separate RNG substreams so that changing
texture parameters never moves a shape. Class ids: 0 ground, 1 sky,
2..C-1 objects.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from segmia.nn.tensor import load_tensor, save_tensor
from segmia.seeding import derive_seed, rng_for


@dataclass(frozen=True)
class ClassStyle:
    color: tuple
    noise_scale: float = 1.0
    jitter_scale: float = 1.0  # multiplies the per-scene tint draw


DEFAULT_PALETTE = (
    ClassStyle(color=(0.32, 0.30, 0.28), noise_scale=1.0),  # ground
    ClassStyle(color=(0.55, 0.65, 0.85), noise_scale=0.5),  # sky
    ClassStyle(color=(0.55, 0.25, 0.20), noise_scale=1.2),
    ClassStyle(color=(0.62, 0.32, 0.22), noise_scale=1.2),  # deliberately close to class 2
    ClassStyle(color=(0.45, 0.42, 0.20), noise_scale=1.2),
)

# palette for the independent-attacker shadow distribution: same layout,
# shifted colors and noisier texture
SHIFTED_PALETTE = (
    ClassStyle(color=(0.26, 0.34, 0.24), noise_scale=1.1),
    ClassStyle(color=(0.62, 0.60, 0.78), noise_scale=0.6),
    ClassStyle(color=(0.48, 0.30, 0.28), noise_scale=1.3),
    ClassStyle(color=(0.56, 0.38, 0.30), noise_scale=1.3),
    ClassStyle(color=(0.38, 0.46, 0.26), noise_scale=1.3),
)


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 5
    objects_min: int = 2
    objects_max: int = 6
    horizon_low: float = 0.40
    horizon_high: float = 0.62
    object_min_half: int = 3
    object_max_half: int = 10
    texture_noise_sigma: float = 0.12
    texture_grain: int = 1  # side of the correlated-noise cells, 1 = per pixel
    brightness_jitter: float = 0.06
    color_jitter: float = 0.06
    palette: tuple = DEFAULT_PALETTE

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ValueError(f"scene dims must be at least 16, got {self.height}x{self.width}")
        if self.num_classes < 3:
            raise ValueError("need at least ground, sky and one object class")
        if len(self.palette) != self.num_classes:
            raise ValueError(
                f"palette has {len(self.palette)} styles for {self.num_classes} classes"
            )
        if not 0 <= self.objects_min <= self.objects_max:
            raise ValueError("objects_min/objects_max out of order")
        if not 0.0 <= self.horizon_low <= self.horizon_high <= 1.0:
            raise ValueError("horizon bounds out of order")
        if not 0 < self.object_min_half <= self.object_max_half:
            raise ValueError("object half-extents out of order")
        if self.texture_noise_sigma < 0 or self.brightness_jitter < 0 or self.color_jitter < 0:
            raise ValueError("noise parameters must be non-negative")
        if self.texture_grain < 1:
            raise ValueError("texture_grain must be at least 1")


@dataclass
class LabeledImage:
    image: np.ndarray = field(repr=False)  # (H, W, 3) float32 in [0, 1]
    labels: np.ndarray = field(repr=False)  # (H, W) int32

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.image.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()


def _grainy_noise(rng, h: int, w: int, grain: int) -> np.ndarray:
    """Unit-variance noise at the grid nodes, bilinear between them.

    The correlation length is ``grain`` pixels, which keeps the texture within
    reach of a small convolution's receptive field instead of averaging out.
    """
    ch = (h - 1) // grain + 2
    cw = (w - 1) // grain + 2
    coarse = rng.normal(0.0, 1.0, size=(ch, cw, 3))
    ys = np.arange(h) / grain
    xs = np.arange(w) / grain
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = coarse[y0][:, x0] * (1 - wx) + coarse[y0][:, x0 + 1] * wx
    bottom = coarse[y0 + 1][:, x0] * (1 - wx) + coarse[y0 + 1][:, x0 + 1] * wx
    return top * (1 - wy) + bottom * wy


def generate_scene(config: SceneConfig, seed: int) -> LabeledImage:
    geom = rng_for(seed, "geometry")
    texture = rng_for(seed, "texture")
    h, w, c = config.height, config.width, config.num_classes

    horizon = int(h * geom.uniform(config.horizon_low, config.horizon_high))
    horizon = min(max(horizon, 1), h - 1)
    labels = np.zeros((h, w), dtype=np.int32)
    labels[:horizon, :] = 1

    yy, xx = np.mgrid[0:h, 0:w]
    count = int(geom.integers(config.objects_min, config.objects_max + 1))
    # cycle shuffled class blocks so every scene gets a balanced object mix
    classes = np.concatenate(
        [geom.permutation(np.arange(2, c)) for _ in range(count // max(c - 2, 1) + 1)]
    )[:count]
    for cls in classes:
        cls = int(cls)
        cy = int(np.clip(round(horizon + geom.normal(0.0, 0.15 * h)), 0, h - 1))
        cx = int(geom.integers(0, w))
        ah = int(geom.integers(config.object_min_half, config.object_max_half + 1))
        aw = int(geom.integers(config.object_min_half, config.object_max_half + 1))
        if geom.random() < 0.5:
            mask = (np.abs(yy - cy) <= ah) & (np.abs(xx - cx) <= aw)
        else:
            mask = ((yy - cy) / ah) ** 2 + ((xx - cx) / aw) ** 2 <= 1.0
        labels[mask] = cls

    colors = np.array([s.color for s in config.palette], dtype=np.float32)
    scales = np.array([s.noise_scale for s in config.palette], dtype=np.float32)
    if config.color_jitter > 0:
        # per-scene class tint, the image-specific detail a model can memorize
        jitter = np.array([s.jitter_scale for s in config.palette], dtype=np.float32)
        colors = colors + jitter[:, None] * texture.uniform(
            -config.color_jitter, config.color_jitter, size=(c, 3)
        ).astype(np.float32)
    image = colors[labels]
    if config.texture_noise_sigma > 0:
        if config.texture_grain == 1:
            noise = texture.normal(0.0, config.texture_noise_sigma, size=(h, w, 3))
        else:
            noise = _grainy_noise(texture, h, w, config.texture_grain) * config.texture_noise_sigma
        image = image + noise.astype(np.float32) * scales[labels][..., None]
    if config.brightness_jitter > 0:
        image = image + np.float32(texture.uniform(-config.brightness_jitter, config.brightness_jitter))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return LabeledImage(image=image, labels=labels)


def generate_dataset(config: SceneConfig, count: int, seed: int):
    if count < 0:
        raise ValueError("count must be non-negative")
    return [generate_scene(config, seed + i) for i in range(count)]


@dataclass(frozen=True)
class DatasetSplit:
    victim_in: tuple
    victim_out: tuple
    shadow_in: tuple
    shadow_out: tuple

    def all_indices(self):
        return self.victim_in + self.victim_out + self.shadow_in + self.shadow_out


def split_dataset(count: int, sizes, seed: int) -> DatasetSplit:
    """Disjoint index groups (victim_in, victim_out, shadow_in, shadow_out)."""
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) != 4 or any(s < 0 for s in sizes):
        raise ValueError(f"sizes must be four non-negative ints, got {sizes}")
    if sum(sizes) > count:
        raise ValueError(f"split sizes {sizes} exceed pool of {count}")
    perm = rng_for(seed, "split").permutation(count)
    out = []
    start = 0
    for s in sizes:
        out.append(tuple(int(i) for i in perm[start : start + s]))
        start += s
    return DatasetSplit(*out)


def class_share(scenes, cls: int) -> float:
    total = sum(s.labels.size for s in scenes)
    hits = sum(int((s.labels == cls).sum()) for s in scenes)
    return hits / total


def save_dataset(directory, scenes) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images = np.stack([s.image for s in scenes])
    labels = np.stack([s.labels for s in scenes]).astype(np.float32)
    save_tensor(directory / "images.slkt", images)
    save_tensor(directory / "labels.slkt", labels)
    meta = {"count": len(scenes), "height": int(images.shape[1]), "width": int(images.shape[2])}
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_dataset(directory):
    directory = Path(directory)
    images = load_tensor(directory / "images.slkt")
    labels = load_tensor(directory / "labels.slkt").astype(np.int32)
    return [LabeledImage(image=i, labels=l) for i, l in zip(images, labels)]
