"""Central finite-difference gradient oracle for the network engine.

The engine computes in float32; evaluating f(x +/- h) in float32 buries the
difference quotient in rounding noise, so the oracle runs the identical
mathematics on a float64 copy of the parameters (layers are dtype
preserving). Coordinates whose perturbation flips a relu sign or a max-pool
argmax are skipped: the function is not differentiable across those points,
so a difference quotient there says nothing about the analytic gradient.
"""

import numpy as np

from segmia.nn.layers import MaxPool, Relu
from segmia.nn.network import Network

STEP = 1e-3
TOL = 1e-3


def widen(net: Network) -> Network:
    return Network(layers=net.layers, params=[[p.astype(np.float64) for p in g] for g in net.params])


def _piecewise_signature(net, trace):
    sig = []
    for layer, ctx in zip(net.layers, trace.contexts):
        if isinstance(layer, Relu):
            sig.append(ctx.copy())
        elif isinstance(layer, MaxPool):
            sig.append(ctx[1].copy())
    return sig


def _same_signature(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def relative_errors(analytic, fd_values):
    errs = []
    for a, g in zip(analytic, fd_values):
        denom = max(abs(a), abs(g), 1e-6)
        errs.append(abs(a - g) / denom)
    return errs


def check_network_gradients(
    net,
    x,
    scalarize=None,
    stochastic=False,
    seed=5,
    samples=40,
    rng_seed=1234,
):
    """Compare analytic input/parameter gradients against central differences.

    ``scalarize``: (output_f64 -> (loss, dout)); defaults to a fixed random
    linear functional. Returns (max_rel_err, n_checked, n_skipped).
    """
    rng = np.random.default_rng(rng_seed)
    net64 = widen(net)
    x = np.asarray(x, dtype=np.float32)

    trace32 = net.forward_trace(x, stochastic=stochastic, seed=seed)
    if scalarize is None:
        dout_fixed = rng.normal(0.0, 1.0, trace32.output.shape)

        def scalarize(out):
            return float(out.astype(np.float64).ravel() @ dout_fixed.ravel()), dout_fixed

    _, dout = scalarize(trace32.output)
    dx, grads = net.backward(trace32, dout)

    def evaluate(net_, xv):
        tr = net_.forward_trace(xv, stochastic=stochastic, seed=seed)
        loss, _ = scalarize(tr.output)
        return loss, _piecewise_signature(net_, tr)

    _, base_sig = evaluate(net64, x.astype(np.float64))

    analytic, fd_values = [], []
    skipped = 0

    def probe(get, setv, a_val):
        nonlocal skipped
        orig = get()
        setv(orig + STEP)
        lp, sig_p = evaluate(net64, x64)
        setv(orig - STEP)
        lm, sig_m = evaluate(net64, x64)
        setv(orig)
        if not (_same_signature(sig_p, base_sig) and _same_signature(sig_m, base_sig)):
            skipped += 1
            return
        analytic.append(a_val)
        fd_values.append((lp - lm) / (2 * STEP))

    x64 = x.astype(np.float64)
    flat = x64.ravel()
    for i in rng.choice(flat.size, size=min(samples, flat.size), replace=False):
        probe(lambda: flat[i].copy(), lambda v: flat.__setitem__(i, v), float(dx.ravel()[i]))

    for li, group in enumerate(net64.params):
        for pi, p in enumerate(group):
            pf = p.ravel()
            for i in rng.choice(pf.size, size=min(samples, pf.size), replace=False):
                probe(lambda: pf[i].copy(), lambda v: pf.__setitem__(i, v), float(grads[li][pi].ravel()[i]))

    assert analytic, "all finite-difference samples were skipped"
    total = len(analytic) + skipped
    assert skipped <= total // 2, f"too many non-differentiable samples ({skipped}/{total})"
    return max(relative_errors(analytic, fd_values)), len(analytic), skipped
