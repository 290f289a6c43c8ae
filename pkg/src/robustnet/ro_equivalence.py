"""Numerical certificates for two worst-case least-squares identities.

For fixed x, the supremum of ||(A + D)x - b||_2 over matrix perturbations D
has a closed form for two uncertainty sets:

  Frobenius ball   ||D||_F <= gamma        ->  ||Ax - b||_2 + gamma ||x||_2
  column-wise ball max_i ||D[:, i]||_2 <= rho ->  ||Ax - b||_2 + rho ||x||_1

(the robust counterparts of ridge and lasso regularization). This module
computes both closed forms, builds perturbations attaining them, and
stress-tests the bound with random feasible perturbations.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor_ops import Array

ATTAIN_TOL = 1e-9
UPPER_BOUND_SLACK = 1e-12


@dataclass(frozen=True)
class RoInstance:
    a: Array
    b: Array
    x: Array
    gamma: Optional[float] = None  # Frobenius radius
    rho: Optional[float] = None  # column-wise radius

    def __post_init__(self):
        a, b, x = np.asarray(self.a), np.asarray(self.b), np.asarray(self.x)
        if a.ndim != 2 or b.ndim != 1 or x.ndim != 1:
            raise ValueError("expected matrix a, vectors b and x")
        if a.shape[0] != b.shape[0] or a.shape[1] != x.shape[0]:
            raise ValueError(f"inconsistent dimensions: a {a.shape}, b {b.shape}, x {x.shape}")
        for name, v in (("gamma", self.gamma), ("rho", self.rho)):
            if v is not None and v < 0:
                raise ValueError(f"{name} must be >= 0, got {v}")

    def residual(self) -> Array:
        return self.a @ self.x - self.b


def _require(radius, name: str) -> float:
    if radius is None:
        raise ValueError(f"instance has no {name} radius")
    return float(radius)


def frobenius_sup(inst: RoInstance) -> float:
    """sup over ||D||_F <= gamma of ||(A+D)x - b||: ||Ax-b|| + gamma ||x||."""
    gamma = _require(inst.gamma, "gamma")
    r = inst.residual()
    return float(np.linalg.norm(r) + gamma * np.linalg.norm(inst.x))


def frobenius_worst_case(inst: RoInstance) -> Array:
    """A rank-one perturbation attaining frobenius_sup.

    D* = gamma r x^T / (||r|| ||x||); degenerate residual falls back to an
    arbitrary unit direction, degenerate x to the zero matrix (the sup no
    longer depends on D).
    """
    gamma = _require(inst.gamma, "gamma")
    r = inst.residual()
    xn = np.linalg.norm(inst.x)
    if gamma == 0.0 or xn == 0.0:
        return np.zeros_like(np.asarray(inst.a, dtype=np.float64))
    rn = np.linalg.norm(r)
    direction = r / rn if rn > 0 else np.eye(len(r))[:, 0] if len(r) else r
    return gamma * np.outer(direction, inst.x) / xn


def columnwise_sup(inst: RoInstance) -> float:
    """sup over per-column l2 balls of radius rho: ||Ax-b|| + rho ||x||_1."""
    rho = _require(inst.rho, "rho")
    r = inst.residual()
    return float(np.linalg.norm(r) + rho * np.sum(np.abs(inst.x)))


def columnwise_worst_case(inst: RoInstance) -> Array:
    """Columns d_i = rho sign(x_i) r / ||r|| attain columnwise_sup."""
    rho = _require(inst.rho, "rho")
    a = np.asarray(inst.a, dtype=np.float64)
    if rho == 0.0:
        return np.zeros_like(a)
    r = inst.residual()
    rn = np.linalg.norm(r)
    direction = r / rn if rn > 0 else np.eye(a.shape[0])[:, 0]
    return rho * np.outer(direction, np.sign(inst.x))


def _perturbed_value(inst: RoInstance, delta: Array) -> float:
    return float(np.linalg.norm((np.asarray(inst.a) + delta) @ inst.x - inst.b))


def sample_frobenius_values(inst: RoInstance, n: int, seed: int) -> Array:
    """Objective values at n random D on the Frobenius sphere of radius gamma."""
    gamma = _require(inst.gamma, "gamma")
    rng = np.random.default_rng(seed)
    values = np.empty(n)
    for i in range(n):
        d = rng.standard_normal(np.asarray(inst.a).shape)
        fn = np.linalg.norm(d)
        if fn > 0:
            d *= gamma / fn
        values[i] = _perturbed_value(inst, d)
    return values


def sample_columnwise_values(inst: RoInstance, n: int, seed: int) -> Array:
    """Objective values at n random D with every column on the rho sphere."""
    rho = _require(inst.rho, "rho")
    rng = np.random.default_rng(seed)
    a = np.asarray(inst.a)
    values = np.empty(n)
    for i in range(n):
        d = rng.standard_normal(a.shape)
        norms = np.linalg.norm(d, axis=0)
        norms[norms == 0] = 1.0
        d *= rho / norms
        values[i] = _perturbed_value(inst, d)
    return values


@dataclass
class CheckStats:
    name: str
    trials: int = 0
    failures: int = 0
    max_violation: float = float("-inf")  # <= 0 means the check always held

    def record(self, violation: float) -> None:
        self.trials += 1
        self.max_violation = max(self.max_violation, violation)
        if violation > 0:
            self.failures += 1


@dataclass
class VerifyReport:
    trials: int
    seed: int
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.failures == 0 for c in self.checks)

    def to_csv(self, path_or_file) -> None:
        f = path_or_file if isinstance(path_or_file, io.IOBase) else open(path_or_file, "w", newline="")
        try:
            w = csv.writer(f)
            w.writerow(["check", "trials", "failures", "max_violation"])
            for c in self.checks:
                w.writerow([c.name, c.trials, c.failures, f"{c.max_violation:.3e}"])
        finally:
            if f is not path_or_file:
                f.close()


def random_instance(rng: np.random.Generator, degenerate_x: bool = False,
                    zero_residual: bool = False) -> RoInstance:
    m = int(rng.integers(1, 7))
    n = int(rng.integers(1, 7))
    a = rng.standard_normal((m, n))
    x = np.zeros(n) if degenerate_x else rng.standard_normal(n)
    b = a @ x if zero_residual else rng.standard_normal(m)
    return RoInstance(a, b, x,
                      gamma=float(np.abs(rng.normal(1.0, 0.5))),
                      rho=float(np.abs(rng.normal(1.0, 0.5))))


def verify_equivalences(trials: int, seed: int, samples: int = 64) -> VerifyReport:
    """Over random instances: no sampled feasible perturbation beats the
    closed form, the constructive worst case attains it, and the sampling
    gap narrows as the sample budget grows."""
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    checks = {
        name: CheckStats(name)
        for name in ("frobenius_upper_bound", "frobenius_attained", "frobenius_gap_shrinks",
                     "columnwise_upper_bound", "columnwise_attained", "columnwise_gap_shrinks")
    }
    few = max(1, samples // 8)
    for t in range(trials):
        rng = np.random.default_rng((seed, t))
        inst = random_instance(rng, degenerate_x=(t % 7 == 3), zero_residual=(t % 5 == 2))
        for kind, sup, worst, sample in (
            ("frobenius", frobenius_sup, frobenius_worst_case, sample_frobenius_values),
            ("columnwise", columnwise_sup, columnwise_worst_case, sample_columnwise_values),
        ):
            closed = sup(inst)
            values = sample(inst, samples, seed=int(rng.integers(2 ** 31)))
            checks[f"{kind}_upper_bound"].record(float(values.max() - closed - UPPER_BOUND_SLACK))
            achieved = _perturbed_value(inst, worst(inst))
            checks[f"{kind}_attained"].record(abs(achieved - closed) - ATTAIN_TOL)
            # nested budgets: the best of the first `few` samples cannot beat
            # the best of all of them
            gap_few = closed - values[:few].max()
            gap_all = closed - values.max()
            checks[f"{kind}_gap_shrinks"].record(gap_all - gap_few)
    return VerifyReport(trials, seed, list(checks.values()))
