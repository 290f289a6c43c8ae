"""Feed-forward networks with exact backpropagation.

Layers: dense, valid-padding conv2d, max-pool, relu; loss head is softmax
cross-entropy. Backward returns gradients w.r.t. the parameters *and*
w.r.t. the input, which is what the perturbation generators consume.

Conventions:
  - inputs are float64 arrays shaped like the declared input shape,
    batched along a leading axis where noted;
  - dense layers implicitly flatten whatever comes in;
  - all tie-breaks (max-pool argmax, predicted label) go to the lowest
    index so runs are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .tensor_ops import Array, check_finite


# ---------------------------------------------------------------------------
# Layer specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1


@dataclass(frozen=True)
class MaxPool:
    window_h: int
    window_w: int
    stride: Optional[int] = None  # None: stride equals the window size

    def strides(self) -> tuple[int, int]:
        if self.stride is None:
            return self.window_h, self.window_w
        return self.stride, self.stride


@dataclass(frozen=True)
class Relu:
    pass


LayerSpec = Union[Dense, Conv2d, MaxPool, Relu]

_SPEC_KINDS = {"dense": Dense, "conv2d": Conv2d, "maxpool": MaxPool, "relu": Relu}


def spec_to_dict(spec: LayerSpec) -> dict:
    for kind, cls in _SPEC_KINDS.items():
        if isinstance(spec, cls):
            return {"kind": kind, **spec.__dict__}
    raise ValueError(f"unknown layer spec {spec!r}")


def spec_from_dict(d: dict) -> LayerSpec:
    d = dict(d)
    kind = d.pop("kind")
    if kind not in _SPEC_KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    return _SPEC_KINDS[kind](**d)


def _positive(name: str, *values: int) -> None:
    for v in values:
        if v <= 0:
            raise ValueError(f"{name}: dimensions must be positive, got {v}")


def infer_shapes(specs: tuple[LayerSpec, ...], input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Shape after each layer, raising if consecutive layers do not compose."""
    if not specs:
        raise ValueError("empty layer spec list")
    shapes = []
    cur = tuple(input_shape)
    for idx, spec in enumerate(specs):
        if isinstance(spec, Dense):
            _positive("dense", spec.in_dim, spec.out_dim)
            flat = int(np.prod(cur))
            if flat != spec.in_dim:
                raise ValueError(
                    f"layer {idx}: dense expects {spec.in_dim} inputs, got {cur} (= {flat})"
                )
            cur = (spec.out_dim,)
        elif isinstance(spec, Conv2d):
            _positive("conv2d", spec.in_channels, spec.out_channels,
                      spec.kernel_h, spec.kernel_w, spec.stride)
            if len(cur) != 3 or cur[0] != spec.in_channels:
                raise ValueError(f"layer {idx}: conv2d expects ({spec.in_channels}, h, w), got {cur}")
            c, h, w = cur
            oh = (h - spec.kernel_h) // spec.stride + 1
            ow = (w - spec.kernel_w) // spec.stride + 1
            if oh <= 0 or ow <= 0:
                raise ValueError(f"layer {idx}: kernel {spec.kernel_h}x{spec.kernel_w} too large for {cur}")
            cur = (spec.out_channels, oh, ow)
        elif isinstance(spec, MaxPool):
            sh, sw = spec.strides()
            _positive("maxpool", spec.window_h, spec.window_w, sh, sw)
            if len(cur) != 3:
                raise ValueError(f"layer {idx}: maxpool expects (c, h, w), got {cur}")
            c, h, w = cur
            oh = (h - spec.window_h) // sh + 1
            ow = (w - spec.window_w) // sw + 1
            if oh <= 0 or ow <= 0:
                raise ValueError(f"layer {idx}: window {spec.window_h}x{spec.window_w} too large for {cur}")
            cur = (c, oh, ow)
        elif isinstance(spec, Relu):
            pass
        else:
            raise ValueError(f"layer {idx}: unknown spec {spec!r}")
        shapes.append(cur)
    if len(shapes[-1]) != 1:
        raise ValueError(f"network must end in a 1-d class-score layer, got {shapes[-1]}")
    return shapes


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class NetworkParams:
    specs: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    layers: list  # per layer: (W, b) arrays, or None for parameter-free layers

    @property
    def num_classes(self) -> int:
        return infer_shapes(self.specs, self.input_shape)[-1][0]

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            self.specs, self.input_shape,
            [None if p is None else (p[0].copy(), p[1].copy()) for p in self.layers],
        )


def init_params(specs, input_shape, seed: int) -> NetworkParams:
    """Uniform weights with half-width sqrt(2 / fan_in), zero biases."""
    specs = tuple(specs)
    infer_shapes(specs, tuple(input_shape))
    rng = np.random.default_rng(seed)
    layers = []
    for spec in specs:
        if isinstance(spec, Dense):
            s = math.sqrt(2.0 / spec.in_dim)
            w = rng.uniform(-s, s, size=(spec.out_dim, spec.in_dim))
            b = np.zeros(spec.out_dim)
            layers.append((w, b))
        elif isinstance(spec, Conv2d):
            fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w
            s = math.sqrt(2.0 / fan_in)
            w = rng.uniform(-s, s, size=(spec.out_channels, spec.in_channels,
                                         spec.kernel_h, spec.kernel_w))
            b = np.zeros(spec.out_channels)
            layers.append((w, b))
        else:
            layers.append(None)
    return NetworkParams(specs, tuple(input_shape), layers)


def zero_grads_like(net: NetworkParams) -> list:
    return [None if p is None else (np.zeros_like(p[0]), np.zeros_like(p[1]))
            for p in net.layers]


def flat_params(net: NetworkParams) -> Array:
    """All parameters as one vector, layer order, weights before biases."""
    parts = []
    for p in net.layers:
        if p is not None:
            parts.append(p[0].ravel())
            parts.append(p[1].ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


# ---------------------------------------------------------------------------
# conv2d / maxpool internals
# ---------------------------------------------------------------------------

def _im2col(x: Array, kh: int, kw: int, stride: int):
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n, oh * ow, c * kh * kw), oh, ow


def _col2im(dcols: Array, x_shape, kh: int, kw: int, stride: int, oh: int, ow: int) -> Array:
    n, c, h, w = x_shape
    dcols = dcols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += dcols[:, :, i, j]
    return dx


def _pool_windows(x: Array, wh: int, ww: int, sh: int, sw: int):
    n, c, h, w = x.shape
    oh = (h - wh) // sh + 1
    ow = (w - ww) // sw + 1
    s = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, shape=(n, c, oh, ow, wh, ww),
        strides=(s[0], s[1], s[2] * sh, s[3] * sw, s[2], s[3]),
    )
    return win, oh, ow


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _forward_cached(net: NetworkParams, xs: Array):
    """Batched forward pass; returns logits and the per-layer caches."""
    a = xs
    caches = []
    for spec, params in zip(net.specs, net.layers):
        if isinstance(spec, Dense):
            orig_shape = a.shape
            flat = a.reshape(a.shape[0], -1)
            w, b = params
            caches.append(("dense", flat, orig_shape))
            a = flat @ w.T + b
        elif isinstance(spec, Conv2d):
            w, b = params
            cols, oh, ow = _im2col(a, spec.kernel_h, spec.kernel_w, spec.stride)
            wmat = w.reshape(spec.out_channels, -1)
            out = cols @ wmat.T + b  # (n, oh*ow, oc)
            caches.append(("conv2d", cols, a.shape, oh, ow))
            a = out.transpose(0, 2, 1).reshape(a.shape[0], spec.out_channels, oh, ow)
        elif isinstance(spec, MaxPool):
            sh, sw = spec.strides()
            win, oh, ow = _pool_windows(a, spec.window_h, spec.window_w, sh, sw)
            flat_win = win.reshape(*win.shape[:4], -1)
            # argmax picks the first (lowest flat index) maximum in the window
            idx = np.argmax(flat_win, axis=-1)
            caches.append(("maxpool", idx, a.shape, oh, ow))
            a = np.take_along_axis(flat_win, idx[..., None], axis=-1)[..., 0]
        elif isinstance(spec, Relu):
            mask = (a > 0).astype(a.dtype)
            caches.append(("relu", mask))
            a = a * mask
    return a, caches


def _backward_cached(net: NetworkParams, caches, dlogits: Array):
    """Backward from d(loss)/d(logits); returns summed param grads and dx."""
    grads = zero_grads_like(net)
    d = dlogits
    for li in range(len(net.specs) - 1, -1, -1):
        spec = net.specs[li]
        cache = caches[li]
        if isinstance(spec, Dense):
            _, flat, orig_shape = cache
            w, _ = net.layers[li]
            grads[li] = (d.T @ flat, d.sum(axis=0))
            d = (d @ w).reshape(orig_shape)
        elif isinstance(spec, Conv2d):
            _, cols, x_shape, oh, ow = cache
            w, _ = net.layers[li]
            n = d.shape[0]
            dr = d.reshape(n, spec.out_channels, oh * ow).transpose(0, 2, 1)
            wmat = w.reshape(spec.out_channels, -1)
            dwmat = np.tensordot(dr, cols, axes=([0, 1], [0, 1]))
            grads[li] = (dwmat.reshape(w.shape), dr.sum(axis=(0, 1)))
            dcols = dr @ wmat
            d = _col2im(dcols, x_shape, spec.kernel_h, spec.kernel_w, spec.stride, oh, ow)
        elif isinstance(spec, MaxPool):
            _, idx, x_shape, oh, ow = cache
            sh, sw = spec.strides()
            dx = np.zeros(x_shape, dtype=d.dtype)
            wi, wj = idx // spec.window_w, idx % spec.window_w
            on, oc, orow, ocol = np.indices(idx.shape, sparse=False)
            rows = orow * sh + wi
            cols_ = ocol * sw + wj
            if sh >= spec.window_h and sw >= spec.window_w:
                # non-overlapping windows: target positions are unique
                dx[on, oc, rows, cols_] = d
            else:
                np.add.at(dx, (on, oc, rows, cols_), d)
            d = dx
        elif isinstance(spec, Relu):
            d = d * cache[1]
    return grads, d


def _loss_from_logits(logits: Array, ys: Array):
    """Per-example softmax cross-entropy, its probabilities and d/dlogits."""
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    lse = m[:, 0] + np.log(np.exp(shifted).sum(axis=1))
    n = logits.shape[0]
    losses = lse - logits[np.arange(n), ys]
    probs = np.exp(logits - lse[:, None])
    dlogits = probs.copy()
    dlogits[np.arange(n), ys] -= 1.0
    return losses, probs, dlogits


@dataclass
class LossReport:
    loss: float
    label: int
    probs: Array


def _check_input(net: NetworkParams, x: Array) -> None:
    if tuple(x.shape) != net.input_shape:
        raise ValueError(f"input shape {x.shape} does not match network input {net.input_shape}")


def forward(net: NetworkParams, x: Array, y: int) -> LossReport:
    """Loss, predicted label and class distribution for one example."""
    _check_input(net, x)
    logits, _ = _forward_cached(net, x[None])
    check_finite(logits, "network output")
    losses, probs, _ = _loss_from_logits(logits, np.array([y]))
    return LossReport(float(losses[0]), int(np.argmax(probs[0])), probs[0])


def backward(net: NetworkParams, x: Array, y: int):
    """Exact gradients of the loss at (theta, x, y).

    Returns (param_grads, input_grad, loss); input_grad is the gradient of
    the per-example loss w.r.t. x.
    """
    _check_input(net, x)
    logits, caches = _forward_cached(net, x[None])
    check_finite(logits, "network output")
    losses, _, dlogits = _loss_from_logits(logits, np.array([y]))
    grads, dx = _backward_cached(net, caches, dlogits)
    return grads, dx[0], float(losses[0])


def predict(net: NetworkParams, x: Array) -> int:
    _check_input(net, x)
    return int(predict_batch(net, x[None])[0])


def predict_batch(net: NetworkParams, xs: Array) -> Array:
    logits, _ = _forward_cached(net, xs)
    return np.argmax(logits, axis=1)


def batch_loss_and_grads(net: NetworkParams, xs: Array, ys: Array):
    """Mean loss and mean parameter gradients over a batch, plus the
    per-example input gradients (gradients of each example's own loss)."""
    if len(xs) == 0:
        raise ValueError("empty batch")
    if tuple(xs.shape[1:]) != net.input_shape:
        raise ValueError(f"batch shape {xs.shape[1:]} does not match network input {net.input_shape}")
    logits, caches = _forward_cached(net, xs)
    check_finite(logits, "network output")
    losses, _, dlogits = _loss_from_logits(logits, np.asarray(ys))
    # Backprop of the unscaled per-example dlogits: parameter grads come out
    # summed over the batch, input grads come out per example.
    grads, dxs = _backward_cached(net, caches, dlogits)
    n = len(xs)
    mean_grads = [None if g is None else (g[0] / n, g[1] / n) for g in grads]
    return float(losses.mean()), mean_grads, dxs


def input_gradients(net: NetworkParams, xs: Array, ys: Array) -> Array:
    _, _, dxs = batch_loss_and_grads(net, xs, ys)
    return dxs


# ---------------------------------------------------------------------------
# Architecture presets
# ---------------------------------------------------------------------------

def desk_mnist_arch():
    """Small convnet used for desk-scale experiments on 28x28 inputs."""
    specs = (
        Conv2d(1, 8, 5, 5),
        Relu(),
        MaxPool(2, 2),
        Conv2d(8, 16, 5, 5),
        Relu(),
        MaxPool(2, 2),
        Dense(256, 64),
        Relu(),
        Dense(64, 10),
    )
    return specs, (1, 28, 28)


def paper_mnist_arch():
    """Full-scale reference architecture: 32 and 64 5x5 filters with 3x3
    then 2x2 pooling, dense 200 and 10 on top."""
    specs = (
        Conv2d(1, 32, 5, 5),
        Relu(),
        MaxPool(3, 3),
        Conv2d(32, 64, 5, 5),
        Relu(),
        MaxPool(2, 2),
        Dense(256, 200),
        Relu(),
        Dense(200, 10),
    )
    return specs, (1, 28, 28)
