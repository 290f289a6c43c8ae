"""Training loops: standard SGD, worst-case (min-max) training, and the
blended clean/perturbed objective.

The worst-case loop alternates, per mini-batch, a single ascent step on
every example (against the current parameters) with a single descent step
on the perturbed batch; parameters are never updated on the raw examples.
Fixed (seed, config, data) reproduces parameters bitwise in single-worker
runs.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import nn, perturb
from .data import Dataset
from .perturb import UncertaintySpec

MODES = ("standard", "robust", "blended")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    mode: str = "standard"
    uncertainty: Optional[UncertaintySpec] = None
    alpha: float = 0.5  # blended mode: weight of the clean-batch gradient
    checkpoint_every: int = 0  # epochs between checkpoint_hook calls; 0 = never

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode in ("robust", "blended") and self.uncertainty is None:
            raise ValueError(f"{self.mode} mode requires an uncertainty spec")
        return self


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    test_accuracy: float
    seconds: float


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epoch indices must increase")
        self.records.append(rec)

    def to_csv(self, path_or_file) -> None:
        f = path_or_file if isinstance(path_or_file, io.IOBase) else open(path_or_file, "w", newline="")
        try:
            w = csv.writer(f)
            w.writerow(["epoch", "loss", "test_accuracy", "seconds"])
            for r in self.records:
                w.writerow([r.epoch, f"{r.mean_loss:.6f}", f"{r.test_accuracy:.6f}", f"{r.seconds:.3f}"])
        finally:
            if f is not path_or_file:
                f.close()


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def init_momentum_state(net: nn.NetworkParams) -> list:
    return [None if p is None else (np.zeros_like(p[0]), np.zeros_like(p[1]))
            for p in net.layers]


def sgd_step(net: nn.NetworkParams, grads: list, lr: float, momentum: float, state: list):
    """Classical momentum: v <- mu v + g; theta <- theta - lr v."""
    new_layers, new_state = [], []
    for p, g, v in zip(net.layers, grads, state):
        if p is None:
            new_layers.append(None)
            new_state.append(None)
            continue
        if p[0].shape != g[0].shape or p[1].shape != g[1].shape:
            raise ValueError("gradient shapes do not match parameters")
        vw = momentum * v[0] + g[0]
        vb = momentum * v[1] + g[1]
        w = p[0] - lr * vw
        b = p[1] - lr * vb
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise FloatingPointError("non-finite parameter update")
        new_layers.append((w, b))
        new_state.append((vw, vb))
    return nn.NetworkParams(net.specs, net.input_shape, new_layers), new_state


# ---------------------------------------------------------------------------
# Batch steps
# ---------------------------------------------------------------------------

def standard_step(net, xs, ys, cfg, state):
    loss, grads, _ = nn.batch_loss_and_grads(net, xs, ys)
    net, state = sgd_step(net, grads, cfg.lr, cfg.momentum, state)
    return net, state, loss, xs


def robust_step(net, xs, ys, cfg, state, basis_provider=None):
    """Ascent on the inputs, then descent on the perturbed batch only."""
    perturbed = perturb.perturb_batch(net, xs, ys, cfg.uncertainty, basis_provider)
    loss, grads, _ = nn.batch_loss_and_grads(net, perturbed, ys)
    net, state = sgd_step(net, grads, cfg.lr, cfg.momentum, state)
    return net, state, loss, perturbed


def blended_loss_step(net, xs, ys, spec, alpha, lr, momentum, state,
                      basis_provider=None):
    """Descent on alpha * clean gradient + (1 - alpha) * perturbed gradient.

    The perturbation is held fixed while differentiating (no gradient flows
    through its construction).
    """
    clean_loss, clean_grads, input_grads = nn.batch_loss_and_grads(net, xs, ys)
    perturbed = perturb.apply_steps(xs, input_grads, spec, basis_provider)
    pert_loss, pert_grads, _ = nn.batch_loss_and_grads(net, perturbed, ys)
    grads = [
        None if c is None else (alpha * c[0] + (1.0 - alpha) * p[0],
                                alpha * c[1] + (1.0 - alpha) * p[1])
        for c, p in zip(clean_grads, pert_grads)
    ]
    net, state = sgd_step(net, grads, lr, momentum, state)
    return net, state, alpha * clean_loss + (1.0 - alpha) * pert_loss, perturbed


# ---------------------------------------------------------------------------
# Loops
# ---------------------------------------------------------------------------

def _test_accuracy(net: nn.NetworkParams, test: Dataset, batch: int = 512) -> float:
    if len(test) == 0:
        return 0.0
    hits = 0
    for lo in range(0, len(test), batch):
        xs = test.x[lo:lo + batch]
        hits += int(np.sum(nn.predict_batch(net, xs) == test.y[lo:lo + batch]))
    return hits / len(test)


BatchHook = Callable[[int, int, np.ndarray, np.ndarray, np.ndarray], None]


def _run_loop(specs, input_shape, train: Dataset, test: Dataset, cfg: TrainConfig,
              step_fn, init: Optional[nn.NetworkParams] = None,
              batch_hook: Optional[BatchHook] = None,
              checkpoint_hook=None):
    cfg.validate()
    if len(train) == 0:
        raise ValueError("empty training set")
    net = init.copy() if init is not None else nn.init_params(specs, input_shape, cfg.seed)
    state = init_momentum_state(net)
    trace = TrainTrace()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng((cfg.seed, epoch)).permutation(len(train))
        losses = []
        for bi, lo in enumerate(range(0, len(train), cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            xs, ys = train.x[idx], train.y[idx]
            net, state, loss, used = step_fn(net, xs, ys, cfg, state)
            losses.append(loss)
            if batch_hook is not None:
                batch_hook(epoch, bi, xs, ys, used)
        acc = _test_accuracy(net, test)
        trace.append(EpochRecord(epoch, float(np.mean(losses)), acc, time.perf_counter() - t0))
        if checkpoint_hook is not None and cfg.checkpoint_every > 0 \
                and (epoch + 1) % cfg.checkpoint_every == 0:
            checkpoint_hook(epoch, net)
    return net, trace


def standard_train_loop(specs, input_shape, train, test, cfg, *, init=None,
                        batch_hook=None, checkpoint_hook=None):
    """Plain mini-batch SGD on the raw examples."""
    if cfg.mode != "standard":
        raise ValueError("standard_train_loop requires mode='standard'")
    return _run_loop(specs, input_shape, train, test, cfg, standard_step,
                     init=init, batch_hook=batch_hook, checkpoint_hook=checkpoint_hook)


def robust_train_loop(specs, input_shape, train, test, cfg, *, init=None,
                      basis_provider=None, batch_hook=None, checkpoint_hook=None):
    """Alternating single ascent (inputs) / single descent (parameters)."""
    if cfg.mode != "robust":
        raise ValueError("robust_train_loop requires mode='robust'")
    cfg.validate()

    def step(net, xs, ys, c, state):
        return robust_step(net, xs, ys, c, state, basis_provider)

    return _run_loop(specs, input_shape, train, test, cfg, step,
                     init=init, batch_hook=batch_hook, checkpoint_hook=checkpoint_hook)


def blended_train_loop(specs, input_shape, train, test, cfg, *, init=None,
                       basis_provider=None, batch_hook=None, checkpoint_hook=None):
    if cfg.mode != "blended":
        raise ValueError("blended_train_loop requires mode='blended'")
    cfg.validate()

    def step(net, xs, ys, c, state):
        return blended_loss_step(net, xs, ys, c.uncertainty, c.alpha, c.lr,
                                 c.momentum, state, basis_provider)

    return _run_loop(specs, input_shape, train, test, cfg, step,
                     init=init, batch_hook=batch_hook, checkpoint_hook=checkpoint_hook)


def train(specs, input_shape, train_ds, test_ds, cfg: TrainConfig, **kwargs):
    """Dispatch on cfg.mode."""
    loop = {
        "standard": standard_train_loop,
        "robust": robust_train_loop,
        "blended": blended_train_loop,
    }[cfg.validate().mode]
    return loop(specs, input_shape, train_ds, test_ds, cfg, **kwargs)
