"""Single-step worst-case input perturbations.

Each generator maximizes the linearized loss <grad, delta> over a norm
ball: sign of the gradient for the sup-norm ball, the normalized gradient
for the Euclidean ball, the single heaviest coordinate for the l1 ball,
and the projected-then-normalized gradient when the step is confined to a
tangent subspace. A zero gradient gives a zero step in every family.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import nn
from .tensor_ops import Array, argmax_abs

FAMILIES = ("linf", "l2", "l1", "tangent")

ORTHONORMAL_TOL = 1e-8


@dataclass(frozen=True)
class UncertaintySpec:
    """A per-example uncertainty set: norm ball plus optional box clipping.

    radius 0 is allowed as the degenerate no-perturbation set, which makes
    robust training with radius 0 coincide with standard training.
    """

    family: str
    radius: float
    clip_to_box: bool = True
    box: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown uncertainty family {self.family!r}; expected one of {FAMILIES}")
        if self.radius < 0:
            raise ValueError(f"radius must be >= 0, got {self.radius}")
        lo, hi = self.box
        if not lo < hi:
            raise ValueError(f"box bounds must satisfy lo < hi, got {self.box}")


def steepest_ascent_linf(grad: Array, eps: float) -> Array:
    """eps * sign(grad); the fast gradient-sign step."""
    return eps * np.sign(grad)


def steepest_ascent_l2(grad: Array, r: float) -> Array:
    n = float(np.sqrt(np.sum(grad * grad)))
    if n == 0.0:
        return np.zeros_like(grad)
    return (r / n) * grad


def steepest_ascent_l1(grad: Array, r: float) -> Array:
    """r on the single coordinate of largest gradient magnitude."""
    out = np.zeros_like(grad)
    j = argmax_abs(grad)
    g = grad.ravel()[j]
    if g != 0.0:
        out.ravel()[j] = r * np.sign(g)
    return out


def check_orthonormal(basis: Array, tol: float = ORTHONORMAL_TOL) -> None:
    gram = basis.T @ basis
    if not np.allclose(gram, np.eye(basis.shape[1]), atol=tol):
        raise ValueError("tangent basis columns are not orthonormal")


def tangent_projected_step(grad: Array, basis: Array, r: float) -> Array:
    """l2 ascent step restricted to the span of the basis columns."""
    flat = grad.ravel()
    if basis.ndim != 2 or basis.shape[0] != flat.size:
        raise ValueError(f"basis rows {basis.shape} do not match gradient dimension {flat.size}")
    check_orthonormal(basis)
    p = basis @ (basis.T @ flat)
    n = float(np.sqrt(np.sum(p * p)))
    if n == 0.0:
        return np.zeros_like(grad)
    return ((r / n) * p).reshape(grad.shape)


def box_clip(x: Array, lo: float, hi: float) -> Array:
    if not lo < hi:
        raise ValueError(f"box bounds must satisfy lo < hi, got ({lo}, {hi})")
    return np.clip(x, lo, hi)


def ascent_step(grad: Array, spec: UncertaintySpec, basis: Optional[Array] = None) -> Array:
    if spec.family == "linf":
        return steepest_ascent_linf(grad, spec.radius)
    if spec.family == "l2":
        return steepest_ascent_l2(grad, spec.radius)
    if spec.family == "l1":
        return steepest_ascent_l1(grad, spec.radius)
    if basis is None:
        raise ValueError("tangent family requires a basis")
    return tangent_projected_step(grad, basis, spec.radius)


BasisProvider = Callable[[int, Array], Array]


def apply_steps(xs: Array, input_grads: Array, spec: UncertaintySpec,
                basis_provider: Optional[BasisProvider] = None) -> Array:
    """Perturb each example with its own ascent step; clipping afterwards.

    Clipping may shrink the realized perturbation below the nominal radius;
    the ball bound holds exactly before clipping.
    """
    n = len(xs)
    if spec.family == "linf":
        out = xs + spec.radius * np.sign(input_grads)
    elif spec.family == "l2":
        flat = input_grads.reshape(n, -1)
        norms = np.sqrt(np.sum(flat * flat, axis=1))
        scale = np.divide(spec.radius, norms, out=np.zeros(n), where=norms > 0)
        out = xs + (scale[:, None] * flat).reshape(xs.shape)
    elif spec.family == "l1":
        flat = input_grads.reshape(n, -1)
        j = np.argmax(np.abs(flat), axis=1)
        delta = np.zeros_like(flat)
        delta[np.arange(n), j] = spec.radius * np.sign(flat[np.arange(n), j])
        out = xs + delta.reshape(xs.shape)
    else:
        if basis_provider is None:
            raise ValueError("tangent family requires a basis_provider")
        out = np.empty_like(xs)
        for i in range(n):
            out[i] = xs[i] + tangent_projected_step(
                input_grads[i], basis_provider(i, xs[i]), spec.radius)
    if spec.clip_to_box:
        out = box_clip(out, *spec.box)
    return out


def perturb_batch(net: nn.NetworkParams, xs: Array, ys: Array, spec: UncertaintySpec,
                  basis_provider: Optional[BasisProvider] = None) -> Array:
    """One ascent step per example against the current parameters.

    The input batch is left unmodified; labels are the caller's to keep.
    """
    grads = nn.input_gradients(net, xs, ys)
    return apply_steps(xs, grads, spec, basis_provider)
