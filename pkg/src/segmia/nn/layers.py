"""Layer definitions: shape arithmetic, init, forward and backward passes.

Spatial tensors are (height, width, channels) float32; vectors are 1-D.
Each layer is an immutable spec; parameters live in the owning network as a
list of arrays per layer (empty for parameter-free layers). ``forward``
returns the output plus an opaque context consumed by ``backward``, which
returns the input gradient and per-parameter gradients.
"""

from dataclasses import dataclass, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from segmia.errors import ShapeError


def _require_rank(x, rank, kind):
    if x.ndim != rank:
        raise ShapeError(f"{kind}: expected rank {rank} input, got shape {x.shape}")


@dataclass(frozen=True)
class Conv:
    """2-D convolution with square kernel, zero padding."""

    kernel: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: int = 0

    kind = "conv"

    def __post_init__(self):
        if self.kernel < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"conv: kernel/channels must be positive, got {self}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"conv: bad stride/padding in {self}")

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[2] != self.in_channels:
            raise ShapeError(f"conv: input {in_shape} incompatible with {self}")
        h = in_shape[0] + 2 * self.padding - self.kernel
        w = in_shape[1] + 2 * self.padding - self.kernel
        if h < 0 or w < 0 or h % self.stride or w % self.stride:
            raise ShapeError(f"conv: shape arithmetic fails for input {in_shape} and {self}")
        return (h // self.stride + 1, w // self.stride + 1, self.out_channels)

    def init_params(self, rng):
        fan_in = self.kernel * self.kernel * self.in_channels
        scale = np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, scale, size=(fan_in, self.out_channels))
        # small positive bias keeps relu units alive on non-negative inputs
        b = np.full(self.out_channels, 0.01)
        return [w.astype(np.float32), b.astype(np.float32)]

    def forward(self, x, params, rng=None, ratio_override=None):
        _require_rank(x, 3, "conv")
        ho, wo, _ = self.out_shape(x.shape)
        p = self.padding
        xp = np.pad(x, ((p, p), (p, p), (0, 0))) if p else x
        # windows: (ho', wo', C_in, k, k); flatten order (C_in, kh, kw)
        win = sliding_window_view(xp, (self.kernel, self.kernel), axis=(0, 1))
        win = win[:: self.stride, :: self.stride]
        cols = win.reshape(ho * wo, -1)
        w, b = params
        y = cols @ w + b
        return y.reshape(ho, wo, self.out_channels), (x.shape, cols)

    def backward(self, dy, ctx, params):
        in_shape, cols = ctx
        w, _ = params
        ho, wo, co = dy.shape
        dy_flat = dy.reshape(ho * wo, co)
        dw = cols.T @ dy_flat
        db = dy_flat.sum(axis=0)
        dcols = dy_flat @ w.T
        k, s, p = self.kernel, self.stride, self.padding
        hp, wp = in_shape[0] + 2 * p, in_shape[1] + 2 * p
        dxp = np.zeros((hp, wp, self.in_channels), dtype=dy.dtype)
        dwin = dcols.reshape(ho, wo, self.in_channels, k, k)
        for i in range(k):
            for j in range(k):
                dxp[i : i + ho * s : s, j : j + wo * s : s, :] += dwin[:, :, :, i, j]
        dx = dxp[p : p + in_shape[0], p : p + in_shape[1], :] if p else dxp
        return dx, [dw, db]


@dataclass(frozen=True)
class Relu:
    kind = "relu"

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def init_params(self, rng):
        return []

    def forward(self, x, params, rng=None, ratio_override=None):
        return np.maximum(x, 0.0), x > 0

    def backward(self, dy, ctx, params):
        return dy * ctx, []


@dataclass(frozen=True)
class MaxPool:
    """Non-overlapping max pooling: stride equals the window."""

    window: int

    kind = "maxpool"

    def __post_init__(self):
        if self.window < 1:
            raise ValueError(f"maxpool: window must be positive, got {self.window}")

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"maxpool: expected rank 3 input, got {in_shape}")
        h, w, c = in_shape
        if h % self.window or w % self.window:
            raise ShapeError(f"maxpool: input {in_shape} not divisible by window {self.window}")
        return (h // self.window, w // self.window, c)

    def init_params(self, rng):
        return []

    def forward(self, x, params, rng=None, ratio_override=None):
        ho, wo, c = self.out_shape(x.shape)
        k = self.window
        r = x.reshape(ho, k, wo, k, c).transpose(0, 2, 4, 1, 3).reshape(ho, wo, c, k * k)
        idx = r.argmax(axis=-1)
        y = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)

    def backward(self, dy, ctx, params):
        in_shape, idx = ctx
        ho, wo, c = dy.shape
        k = self.window
        dr = np.zeros((ho, wo, c, k * k), dtype=dy.dtype)
        np.put_along_axis(dr, idx[..., None], dy[..., None], axis=-1)
        dx = dr.reshape(ho, wo, c, k, k).transpose(0, 3, 1, 4, 2).reshape(in_shape)
        return dx, []


@dataclass(frozen=True)
class GlobalAvgPool:
    kind = "gap"

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"gap: expected rank 3 input, got {in_shape}")
        return (in_shape[2],)

    def init_params(self, rng):
        return []

    def forward(self, x, params, rng=None, ratio_override=None):
        return x.mean(axis=(0, 1)), x.shape

    def backward(self, dy, ctx, params):
        h, w, c = ctx
        dx = np.broadcast_to(dy / (h * w), (h, w, c)).astype(dy.dtype)
        return dx, []


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int

    kind = "dense"

    def __post_init__(self):
        if self.in_features < 1 or self.out_features < 1:
            raise ValueError(f"dense: features must be positive, got {self}")

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(f"dense: input {in_shape} incompatible with {self}")
        return (self.out_features,)

    def init_params(self, rng):
        scale = np.sqrt(2.0 / self.in_features)
        w = rng.normal(0.0, scale, size=(self.out_features, self.in_features))
        b = np.full(self.out_features, 0.01)
        return [w.astype(np.float32), b.astype(np.float32)]

    def forward(self, x, params, rng=None, ratio_override=None):
        self.out_shape(x.shape)
        w, b = params
        return w @ x + b, x

    def backward(self, dy, ctx, params):
        w, _ = params
        dw = np.outer(dy, ctx)
        return w.T @ dy, [dw, dy.copy()]


@dataclass(frozen=True)
class Dropout:
    """Inverted dropout; identity when the pass is deterministic."""

    ratio: float

    kind = "dropout"

    def __post_init__(self):
        if not 0.0 <= self.ratio < 1.0:
            raise ValueError(f"dropout: ratio must be in [0, 1), got {self.ratio}")

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def init_params(self, rng):
        return []

    def forward(self, x, params, rng=None, ratio_override=None):
        ratio = self.ratio if ratio_override is None else ratio_override
        if rng is None or ratio == 0.0:
            return x, None
        keep = (rng.random(x.shape) >= ratio).astype(x.dtype)
        scale = 1.0 / (1.0 - ratio)
        mask = keep * scale
        return x * mask, mask

    def backward(self, dy, ctx, params):
        if ctx is None:
            return dy, []
        return dy * ctx, []


@dataclass(frozen=True)
class Softmax:
    """Softmax over the channel (last) axis, per spatial location."""

    kind = "softmax"

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def init_params(self, rng):
        return []

    def forward(self, x, params, rng=None, ratio_override=None):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)
        return y, y

    def backward(self, dy, ctx, params):
        y = ctx
        inner = (dy * y).sum(axis=-1, keepdims=True)
        return y * (dy - inner), []


LAYER_KINDS = {
    cls.kind: cls for cls in (Conv, Relu, MaxPool, GlobalAvgPool, Dense, Dropout, Softmax)
}


def layer_to_dict(layer) -> dict:
    d = {"kind": layer.kind}
    for f in fields(layer):
        d[f.name] = getattr(layer, f.name)
    return d


def layer_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in LAYER_KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    return LAYER_KINDS[kind](**d)
