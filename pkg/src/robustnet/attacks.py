"""Adversarial-set construction, evaluation, and sweeps.

An adversarial set is built from test points the generating net classifies
correctly; a record is kept only when the one-step perturbed example is
misclassified, so the generating net scores exactly 0 on its own set.

On-disk format (little-endian): magic "ADVS" | u16 version | u32 record
count | u32 example dimension | records of {u32 origin index, u8 true
label, u8 family code, f32 radius, f32 * dim example values}. Examples are
quantized to float32 at construction time so the membership invariants
survive the round trip exactly.
"""

from __future__ import annotations

import csv
import io
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import nn, perturb
from .data import Dataset
from .perturb import UncertaintySpec
from .tensor_ops import Array

ADVS_MAGIC = b"ADVS"
ADVS_VERSION = 1

FAMILY_CODES = {"linf": 0, "l2": 1, "l1": 2, "tangent": 3}
FAMILY_NAMES = {v: k for k, v in FAMILY_CODES.items()}

DEFAULT_RADII = {"linf": 0.1, "l2": 2.0, "l1": 1.0}


class AdvSetError(ValueError):
    pass


@dataclass
class AdvRecord:
    origin_index: int
    true_label: int
    family: str
    radius: float
    example: Array  # flat float32


@dataclass
class AdversarialSet:
    records: list = field(default_factory=list)
    source_id: str = ""  # fingerprint of the generating checkpoint

    def __len__(self) -> int:
        return len(self.records)


def _chunks(n: int, workers: int):
    workers = max(1, workers)
    size = max(1, -(-n // workers))
    return [(lo, min(lo + size, n)) for lo in range(0, n, size)]


def predict_all(net: nn.NetworkParams, xs: Array, workers: int = 1, batch: int = 512) -> Array:
    """Predicted labels for a stack of examples, in input order."""

    def run(span):
        lo, hi = span
        parts = [nn.predict_batch(net, xs[i:i + batch]) for i in range(lo, hi, batch)]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    spans = _chunks(len(xs), workers)
    if workers <= 1 or len(spans) <= 1:
        results = [run(s) for s in spans]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, spans))
    return np.concatenate(results) if results else np.zeros(0, dtype=np.int64)


def evaluate(net: nn.NetworkParams, dataset: Dataset, workers: int = 1) -> float:
    """Fraction of examples predicted correctly."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    xs = dataset.x.reshape(len(dataset), *net.input_shape)
    preds = predict_all(net, xs, workers=workers)
    return float(np.mean(preds == dataset.y))


def _input_grads_chunked(net, xs, ys, workers: int = 1, batch: int = 256) -> Array:
    def run(span):
        lo, hi = span
        parts = [nn.input_gradients(net, xs[i:i + batch], ys[i:i + batch])
                 for i in range(lo, hi, batch)]
        return np.concatenate(parts)

    spans = _chunks(len(xs), workers)
    if workers <= 1 or len(spans) <= 1:
        results = [run(s) for s in spans]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, spans))
    return np.concatenate(results)


def candidate_pool(n_test: int, pool_size: int, seed: int) -> Array:
    """Seeded fixed-size subset of test indices, ascending."""
    if pool_size >= n_test:
        return np.arange(n_test)
    idx = np.random.default_rng(seed).permutation(n_test)[:pool_size]
    return np.sort(idx)


def build_adversarial_set(net: nn.NetworkParams, test: Dataset, families,
                          radii=None, pool_size: int = 1000, seed: int = 0,
                          box=(0.0, 1.0), source_id: str = "",
                          workers: int = 1) -> AdversarialSet:
    """One ascent step per family on each correctly classified pool point,
    keeping the perturbed example iff the generating net misclassifies it."""
    if len(test) == 0:
        raise ValueError("empty test set")
    radii = {**DEFAULT_RADII, **(radii or {})}
    pool = candidate_pool(len(test), pool_size, seed)
    xs = test.x[pool].reshape(len(pool), *net.input_shape)
    ys = test.y[pool]

    preds = predict_all(net, xs, workers=workers)
    correct = preds == ys
    cx, cy, cidx = xs[correct], ys[correct], pool[correct]
    records = []
    if len(cx):
        grads = _input_grads_chunked(net, cx, cy, workers=workers)
        for family in families:
            spec = UncertaintySpec(family, radii[family], clip_to_box=True, box=box)
            perturbed = perturb.apply_steps(cx, grads, spec)
            # float32 quantization happens before the membership check so the
            # stored bytes are exactly what was verified
            quantized = perturbed.astype(np.float32)
            adv_preds = predict_all(net, quantized.astype(np.float64), workers=workers)
            for i in np.flatnonzero(adv_preds != cy):
                records.append(AdvRecord(int(cidx[i]), int(cy[i]), family,
                                         float(radii[family]), quantized[i].ravel()))
    records.sort(key=lambda r: (r.origin_index, FAMILY_CODES[r.family]))
    return AdversarialSet(records, source_id)


def adversarial_dataset(adv: AdversarialSet, input_shape, num_classes: int = 10) -> Dataset:
    """View an adversarial set as a Dataset for evaluation."""
    if not adv.records:
        raise ValueError("empty adversarial set")
    dim = int(np.prod(input_shape))
    xs = np.stack([r.example for r in adv.records]).astype(np.float64)
    if xs.shape[1] != dim:
        raise AdvSetError(f"example dimension {xs.shape[1]} does not match input shape {input_shape}")
    ys = np.array([r.true_label for r in adv.records], dtype=np.int64)
    return Dataset(xs.reshape(len(xs), *input_shape), ys, num_classes)


def validate_adversarial_set(adv: AdversarialSet, net: nn.NetworkParams, test: Dataset) -> list:
    """Re-check both membership conditions; returns human-readable violations."""
    violations = []
    for r in adv.records:
        origin = test.x[r.origin_index].reshape(net.input_shape)
        if test.y[r.origin_index] != r.true_label:
            violations.append(f"record {r.origin_index}: stored label {r.true_label} != dataset label")
        if nn.predict(net, origin) != r.true_label:
            violations.append(f"record {r.origin_index}: origin not correctly classified")
        x_adv = r.example.astype(np.float64).reshape(net.input_shape)
        if nn.predict(net, x_adv) == r.true_label:
            violations.append(f"record {r.origin_index}: perturbed example not misclassified")
    return violations


# ---------------------------------------------------------------------------
# ADVS file format
# ---------------------------------------------------------------------------

def save_adversarial_set(adv: AdversarialSet, path) -> None:
    if adv.records:
        dim = len(adv.records[0].example)
        if any(len(r.example) != dim for r in adv.records):
            raise AdvSetError("records have inconsistent example dimensions")
    else:
        dim = 0
    with open(path, "wb") as f:
        f.write(ADVS_MAGIC)
        f.write(struct.pack("<HII", ADVS_VERSION, len(adv.records), dim))
        for r in adv.records:
            f.write(struct.pack("<IBBf", r.origin_index, r.true_label,
                                FAMILY_CODES[r.family], r.radius))
            f.write(np.ascontiguousarray(r.example, dtype="<f4").tobytes())


def load_adversarial_set(path) -> AdversarialSet:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 14 or blob[:4] != ADVS_MAGIC:
        raise AdvSetError(f"{path}: not an adversarial-set file")
    version, count, dim = struct.unpack("<HII", blob[4:14])
    if version != ADVS_VERSION:
        raise AdvSetError(f"{path}: unsupported version {version}")
    rec_size = 10 + 4 * dim
    if len(blob) != 14 + count * rec_size:
        raise AdvSetError(f"{path}: truncated or trailing bytes")
    records = []
    off = 14
    for _ in range(count):
        origin, label, code, radius = struct.unpack("<IBBf", blob[off:off + 10])
        if code not in FAMILY_NAMES:
            raise AdvSetError(f"{path}: unknown family code {code}")
        values = np.frombuffer(blob[off + 10:off + rec_size], dtype="<f4").copy()
        records.append(AdvRecord(origin, label, FAMILY_NAMES[code], radius, values))
        off += rec_size
    return AdversarialSet(records)


# ---------------------------------------------------------------------------
# Cross-evaluation and sweeps
# ---------------------------------------------------------------------------

@dataclass
class CrossEvalRow:
    net: str
    clean_acc: float
    adv_acc: float


def cross_evaluate(nets, adv: AdversarialSet, test: Dataset, workers: int = 1) -> list:
    """Accuracy of each (name, params) pair on clean test data and on the
    adversarial set."""
    rows = []
    for name, net in nets:
        clean = evaluate(net, test, workers=workers)
        adv_ds = adversarial_dataset(adv, net.input_shape, test.num_classes)
        rows.append(CrossEvalRow(name, clean, evaluate(net, adv_ds, workers=workers)))
    return rows


def write_cross_eval_csv(rows, path_or_file) -> None:
    _write_csv(path_or_file, ["net", "clean_acc", "adv_acc"],
               [[r.net, f"{r.clean_acc:.6f}", f"{r.adv_acc:.6f}"] for r in rows])


@dataclass
class SweepRow:
    net: str
    epsilon: float
    accuracy: float
    n: int


@dataclass
class SweepReport:
    rows: list = field(default_factory=list)

    def to_csv(self, path_or_file) -> None:
        _write_csv(path_or_file, ["net", "epsilon", "accuracy", "n"],
                   [[r.net, f"{r.epsilon:g}", f"{r.accuracy:.6f}", r.n] for r in self.rows])


def epsilon_sweep(nets, test: Dataset, eps_list, box=(0.0, 1.0), workers: int = 1) -> SweepReport:
    """Self-attack: each net is attacked with the sign step at its *own*
    parameters for every epsilon, then evaluated on the result."""
    eps_list = [float(e) for e in eps_list]
    if not eps_list:
        raise ValueError("empty epsilon list")
    if any(e < 0 for e in eps_list):
        raise ValueError("epsilon values must be >= 0")
    if sorted(eps_list) != eps_list or len(set(eps_list)) != len(eps_list):
        raise ValueError("epsilon values must be strictly increasing")
    report = SweepReport()
    for name, net in nets:
        xs = test.x.reshape(len(test), *net.input_shape)
        grads = _input_grads_chunked(net, xs, test.y, workers=workers)
        signs = np.sign(grads)
        for eps in eps_list:
            adv = perturb.box_clip(xs + eps * signs, *box)
            preds = predict_all(net, adv, workers=workers)
            report.rows.append(SweepRow(name, eps, float(np.mean(preds == test.y)), len(test)))
    return report


@dataclass
class SinglePixelHit:
    origin_index: int
    pixel_flat: int
    pixel_coords: tuple
    old_label: int
    new_label: int


def single_pixel_report(net: nn.NetworkParams, test: Dataset, r: float,
                        pool_size: int = 1000, seed: int = 0,
                        box=(0.0, 1.0), workers: int = 1) -> list:
    """Successful one-coordinate flips against correctly classified points."""
    if r <= 0:
        raise ValueError(f"radius must be > 0, got {r}")
    pool = candidate_pool(len(test), pool_size, seed)
    xs = test.x[pool].reshape(len(pool), *net.input_shape)
    ys = test.y[pool]
    preds = predict_all(net, xs, workers=workers)
    correct = preds == ys
    cx, cy, cidx = xs[correct], ys[correct], pool[correct]
    if len(cx) == 0:
        return []
    grads = _input_grads_chunked(net, cx, cy, workers=workers)
    spec = UncertaintySpec("l1", r, clip_to_box=True, box=box)
    perturbed = perturb.apply_steps(cx, grads, spec)
    new_preds = predict_all(net, perturbed, workers=workers)
    hits = []
    for i in np.flatnonzero(new_preds != cy):
        diff = np.flatnonzero(perturbed[i].ravel() != cx[i].ravel())
        flat = int(diff[0])
        hits.append(SinglePixelHit(int(cidx[i]), flat,
                                   tuple(int(v) for v in np.unravel_index(flat, net.input_shape)),
                                   int(cy[i]), int(new_preds[i])))
    return hits


def write_single_pixel_csv(hits, path_or_file) -> None:
    _write_csv(path_or_file, ["origin_index", "pixel_flat", "pixel_coords", "old_label", "new_label"],
               [[h.origin_index, h.pixel_flat, "x".join(map(str, h.pixel_coords)),
                 h.old_label, h.new_label] for h in hits])


def _write_csv(path_or_file, header, rows) -> None:
    f = path_or_file if isinstance(path_or_file, io.IOBase) else open(path_or_file, "w", newline="")
    try:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    finally:
        if f is not path_or_file:
            f.close()
