"""Deterministic derivation of named RNG substreams from a master seed.

Every stochastic component takes an explicit integer seed. Substreams are
derived by hashing the master seed together with string labels, so adding a
new consumer never perturbs the streams of existing ones.
"""

import hashlib

import numpy as np


def derive_seed(master: int, *labels) -> int:
    """Derive a stable 63-bit seed from a master seed and a label path."""
    h = hashlib.sha256()
    h.update(str(int(master)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    # keep it positive and within numpy's accepted range
    return int.from_bytes(h.digest()[:8], "little") >> 1


def rng_for(master: int, *labels) -> np.random.Generator:
    """Generator for the substream named by ``labels``."""
    return np.random.default_rng(derive_seed(master, *labels))
