"""Dense-array primitives shared by every other module.

Arrays are plain numpy ndarrays, row-major, float64 in verification code
and at least float32 during training. Everything here is pure; inputs are
never mutated.
"""

from __future__ import annotations

import numpy as np

Array = np.ndarray


def as_array(x) -> Array:
    return np.asarray(x, dtype=np.float64)


def check_finite(x: Array, what: str = "array") -> Array:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x


def _check_same_shape(a: Array, b: Array) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def add(a: Array, b: Array) -> Array:
    _check_same_shape(a, b)
    return a + b


def sub(a: Array, b: Array) -> Array:
    _check_same_shape(a, b)
    return a - b


def mul(a: Array, b: Array) -> Array:
    _check_same_shape(a, b)
    return a * b


def scalar_mul(c: float, a: Array) -> Array:
    return float(c) * a


def relu(a: Array) -> Array:
    return np.maximum(a, 0.0)


def relu_mask(a: Array) -> Array:
    """Backward mask of relu: 1 where a > 0, else 0 (0 at the kink)."""
    return (a > 0).astype(a.dtype)


def matmul(a: Array, b: Array) -> Array:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-d operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    return a @ b


def norm(x: Array, family: str) -> float:
    """||x||_1, ||x||_2 or ||x||_inf of the flattened array."""
    flat = np.asarray(x).ravel()
    if family == "l1":
        return float(np.sum(np.abs(flat)))
    if family == "l2":
        return float(np.sqrt(np.sum(flat * flat)))
    if family == "linf":
        return float(np.max(np.abs(flat))) if flat.size else 0.0
    raise ValueError(f"unknown norm family {family!r}")


def sign(x: Array) -> Array:
    """Elementwise sign with sign(0) = 0."""
    return np.sign(x)


def argmax_abs(x: Array) -> int:
    """Lowest flat index of the entry of largest magnitude."""
    flat = np.asarray(x).ravel()
    if flat.size == 0:
        raise ValueError("argmax_abs of empty array")
    return int(np.argmax(np.abs(flat)))
