"""SGD with momentum and a differentially-private variant.

Gradients mirror the network parameter structure: one list of arrays per
layer, empty for parameter-free layers. DPSGD clips each example's gradient
per layer to a precomputed factor, averages, and perturbs the average with
Gaussian noise scaled by clip / batch_size.
"""

import math

import numpy as np

from segmia.nn.losses import cross_entropy


def sgd_step(params, grads, learning_rate, momentum=0.0, velocity=None):
    """Classical momentum update, in place. Returns the velocity buffers.

    v <- momentum * v + g;  p <- p - learning_rate * v
    """
    if velocity is None:
        velocity = [[np.zeros_like(p) for p in group] for group in params]
    for pg, gg, vg in zip(params, grads, velocity):
        for i in range(len(pg)):
            vg[i] = momentum * vg[i] + gg[i]
            pg[i] -= learning_rate * vg[i]
    return velocity


def layer_grad_norms(grads):
    """L2 norm of each layer's gradient group (0.0 for parameter-free layers)."""
    return [
        math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in group)) if group else 0.0
        for group in grads
    ]


def _check_clip_factors(grads, clip_factors):
    for i, group in enumerate(grads):
        if not group:
            continue
        if i not in clip_factors:
            raise ValueError(f"no clipping factor for parameter-bearing layer {i}")
        if not clip_factors[i] > 0:
            raise ValueError(f"clipping factor for layer {i} must be positive")


def clip_gradients(grads, clip_factors):
    """Scale each layer group so its L2 norm is at most clip_factors[layer]."""
    _check_clip_factors(grads, clip_factors)
    norms = layer_grad_norms(grads)
    out = []
    for i, group in enumerate(grads):
        if not group:
            out.append([])
            continue
        scale = 1.0 if norms[i] <= clip_factors[i] else clip_factors[i] / norms[i]
        out.append([(g * scale).astype(g.dtype) for g in group])
    return out


def dpsgd_step(params, per_example_grads, clip_factors, noise_variance, learning_rate, seed):
    """Clip, average, noise, then apply a plain (momentum-free) SGD step."""
    if noise_variance < 0:
        raise ValueError(f"noise_variance must be non-negative, got {noise_variance}")
    if not per_example_grads:
        raise ValueError("dpsgd_step needs at least one per-example gradient")
    batch = len(per_example_grads)
    clipped = [clip_gradients(g, clip_factors) for g in per_example_grads]
    mean = [
        [np.mean([ex[i][j] for ex in clipped], axis=0, dtype=np.float32) for j in range(len(group))]
        for i, group in enumerate(params)
    ]
    if noise_variance > 0:
        rng = np.random.default_rng(seed)
        for i, group in enumerate(mean):
            if not group:
                continue
            std = math.sqrt(noise_variance) * clip_factors[i] / batch
            for j in range(len(group)):
                group[j] = group[j] + rng.normal(0.0, std, size=group[j].shape).astype(np.float32)
    sgd_step(params, mean, learning_rate, momentum=0.0)


def estimate_clip_factors(network, examples, quantile=0.9, loss=cross_entropy):
    """Per-layer clipping factors from one pass over ``examples``.

    For each (input, target) pair, computes the per-layer gradient L2 norms
    of the loss and returns, per parameter-bearing layer, the ``quantile``
    order statistic (inverted CDF: sorted[ceil(q * n) - 1]).
    """
    if not 0.0 < quantile <= 1.0:
        raise ValueError(f"quantile must be in (0, 1], got {quantile}")
    per_layer = None
    count = 0
    for x, target in examples:
        trace = network.forward_trace(x)
        _, out_grad = loss(trace.output, target)
        _, grads = network.backward(trace, out_grad)
        norms = layer_grad_norms(grads)
        if per_layer is None:
            per_layer = [[] for _ in norms]
        for i, group in enumerate(grads):
            if group:
                per_layer[i].append(norms[i])
        count += 1
    if not count:
        raise ValueError("estimate_clip_factors needs a non-empty dataset")
    factors = {}
    for i, norms in enumerate(per_layer):
        if not norms:
            continue
        norms.sort()
        k = min(len(norms) - 1, math.ceil(quantile * len(norms)) - 1)
        clip = norms[k]
        if not clip > 0:
            raise ValueError(f"estimated clipping factor for layer {i} is not positive")
        factors[i] = clip
    return factors
