"""Minimal float32 neural-network engine on numpy arrays."""

from segmia.nn.tensor import load_tensor, require_finite, save_tensor  # noqa: F401
