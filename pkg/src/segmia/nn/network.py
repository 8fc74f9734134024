"""Sequential network: construction, inference, backprop, checkpointing."""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from segmia.errors import ShapeError
from segmia.nn.layers import layer_from_dict, layer_to_dict
from segmia.nn.tensor import load_tensor, require_finite, save_tensor


@dataclass
class Network:
    layers: tuple
    params: list = field(repr=False)  # list of per-layer param lists

    @property
    def dtype(self):
        for group in self.params:
            for p in group:
                return p.dtype
        return np.dtype(np.float32)

    def forward(self, x, stochastic=False, seed=0, dropout_override=None):
        return self.forward_trace(x, stochastic, seed, dropout_override).output

    def forward_trace(self, x, stochastic=False, seed=0, dropout_override=None):
        x = np.ascontiguousarray(x, dtype=self.dtype)
        require_finite(x, "network input")
        rng = np.random.default_rng(seed) if stochastic else None
        contexts = []
        for i, (layer, p) in enumerate(zip(self.layers, self.params)):
            try:
                x, ctx = layer.forward(x, p, rng=rng, ratio_override=dropout_override)
            except ShapeError as err:
                raise ShapeError(f"layer {i} ({layer.kind}): {err}") from None
            contexts.append(ctx)
        return ForwardTrace(output=x, contexts=contexts)

    def backward(self, trace, output_gradient):
        """Backprop ``output_gradient`` through the traced pass.

        Returns (input_gradient, grads) where grads mirrors ``self.params``.
        """
        dy = np.ascontiguousarray(output_gradient, dtype=self.dtype)
        if dy.shape != trace.output.shape:
            raise ShapeError(
                f"output gradient shape {dy.shape} != output shape {trace.output.shape}"
            )
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            dy, grads[i] = self.layers[i].backward(dy, trace.contexts[i], self.params[i])
        return dy, grads

    def zero_grads(self):
        return [[np.zeros_like(p) for p in group] for group in self.params]

    def param_count(self):
        return sum(p.size for group in self.params for p in group)


@dataclass
class ForwardTrace:
    output: np.ndarray
    contexts: list


def build_network(layers, seed: int) -> Network:
    rng = np.random.default_rng(seed)
    layers = tuple(layers)
    params = [layer.init_params(rng) for layer in layers]
    return Network(layers=layers, params=params)


def infer_shapes(layers, input_shape):
    """Output shape after each layer; raises ShapeError on a mismatch."""
    shapes = []
    shape = tuple(input_shape)
    for i, layer in enumerate(layers):
        try:
            shape = layer.out_shape(shape)
        except ShapeError as err:
            raise ShapeError(f"layer {i} ({layer.kind}): {err}") from None
        shapes.append(shape)
    return shapes


def save_checkpoint(directory, network: Network, meta: dict | None = None) -> None:
    """Write manifest.json plus one tensor container per parameter."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = {}
    for i, group in enumerate(network.params):
        for j, p in enumerate(group):
            name = f"layer{i:02d}_p{j}"
            names[name] = name + ".slkt"
            save_tensor(directory / names[name], p)
    manifest = {
        "format": 1,
        "layers": [layer_to_dict(layer) for layer in network.layers],
        "params": names,
        "meta": meta or {},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(directory):
    """Return (network, meta) from a checkpoint directory."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != 1:
        raise ValueError(f"{directory}: unsupported checkpoint format")
    layers = tuple(layer_from_dict(d) for d in manifest["layers"])
    params = [[] for _ in layers]
    for name, filename in sorted(manifest["params"].items()):
        idx = int(name.split("_")[0].removeprefix("layer"))
        params[idx].append(load_tensor(directory / filename))
    return Network(layers=layers, params=params), manifest.get("meta", {})
