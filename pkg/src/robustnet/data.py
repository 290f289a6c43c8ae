"""Dataset ingestion and checkpoint persistence.

Covers the standard IDX image/label container (big-endian), two synthetic
generators (Gaussian blobs for fast tests, rendered digit images for
desk-scale experiments when no real digit data is on disk), seeded
split/shuffle helpers, and a versioned binary checkpoint format.
"""

from __future__ import annotations

import datetime
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import nn
from .tensor_ops import Array

DATA_DIR_ENV = "ROBUSTNET_DATA_DIR"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"


class IdxError(ValueError):
    pass


class IdxBadMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


@dataclass
class Dataset:
    """Uniformly shaped examples with integer labels in [0, num_classes).

    x holds normalized values; raw = (x - offset) / scale inverts the
    normalization (for IDX images scale = 1/255, offset = 0).
    """

    x: Array
    y: Array
    num_classes: int
    scale: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} examples but {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def example_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.num_classes, self.scale, self.offset)

    def head(self, n: int) -> "Dataset":
        return self.subset(np.arange(min(n, len(self))))


# ---------------------------------------------------------------------------
# IDX container
# ---------------------------------------------------------------------------

def _read_exact(f, nbytes: int, path, what: str) -> bytes:
    buf = f.read(nbytes)
    if len(buf) != nbytes:
        raise IdxTruncatedError(f"{path}: truncated while reading {what}")
    return buf


def _read_be32(f, path, what: str) -> int:
    return struct.unpack(">I", _read_exact(f, 4, path, what))[0]


def load_idx_images(path) -> Array:
    # Big-endian header: magic, item count, row count, column count,
    # then one unsigned byte per pixel, row-wise.
    with open(path, "rb") as f:
        magic = _read_be32(f, path, "magic")
        if magic != IDX_IMAGES_MAGIC:
            raise IdxBadMagicError(f"{path}: bad image magic 0x{magic:08x}")
        count = _read_be32(f, path, "count")
        rows = _read_be32(f, path, "rows")
        cols = _read_be32(f, path, "cols")
        raw = _read_exact(f, count * rows * cols, path, "pixels")
    return np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)


def load_idx_labels(path) -> Array:
    with open(path, "rb") as f:
        magic = _read_be32(f, path, "magic")
        if magic != IDX_LABELS_MAGIC:
            raise IdxBadMagicError(f"{path}: bad label magic 0x{magic:08x}")
        count = _read_be32(f, path, "count")
        raw = _read_exact(f, count, path, "labels")
    return np.frombuffer(raw, dtype=np.uint8)


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """IDX image/label pair as a Dataset with pixels scaled to [0, 1]."""
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IdxCountMismatchError(
            f"{images_path} has {len(images)} images but {labels_path} has {len(labels)} labels"
        )
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(x, labels.astype(np.int64), num_classes=10, scale=1.0 / 255.0)


def write_idx_images(path, images: Array) -> None:
    images = np.ascontiguousarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path, labels: Array) -> None:
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------

def synth_blobs(n_per_class: int, num_classes: int, dim: int, spread: float, seed: int) -> Dataset:
    """Gaussian clusters at seeded random centers, clipped to [0, 1]^dim."""
    if n_per_class <= 0 or num_classes <= 0 or dim <= 0 or spread < 0:
        raise ValueError("synth_blobs parameters must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.15, 0.85, size=(num_classes, dim))
    xs, ys = [], []
    for k in range(num_classes):
        pts = centers[k] + spread * rng.standard_normal((n_per_class, dim))
        xs.append(np.clip(pts, 0.0, 1.0))
        ys.append(np.full(n_per_class, k, dtype=np.int64))
    return Dataset(np.concatenate(xs), np.concatenate(ys), num_classes)


# 5x7 pixel glyphs for the rendered-digit generator.
_DIGIT_GLYPHS = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
]

_GLYPHS = np.array(
    [[[c == "1" for c in row] for row in glyph] for glyph in _DIGIT_GLYPHS],
    dtype=np.float64,
)


def _render_digit(digit: int, rng: np.random.Generator, size: int = 28) -> Array:
    canvas = np.zeros((size, size))
    glyph = np.kron(_GLYPHS[digit], np.ones((3, 3)))  # 21x15
    gh, gw = glyph.shape
    top, left = (size - gh) // 2, (size - gw) // 2
    canvas[top:top + gh, left:left + gw] = glyph

    theta = rng.uniform(-0.35, 0.35)
    shear = rng.uniform(-0.35, 0.35)
    sy, sx = rng.uniform(0.70, 1.22, size=2)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    shr = np.array([[1.0, shear], [0.0, 1.0]])
    mat = rot @ shr @ np.diag([sy, sx])
    center = np.array([(size - 1) / 2.0, (size - 1) / 2.0])
    shift = rng.uniform(-2.5, 2.5, size=2)
    img = ndimage.affine_transform(
        canvas, mat, offset=center - mat @ center + shift, order=1, mode="constant"
    )

    # smooth elastic warp for intra-class variety
    amp = rng.uniform(0.5, 2.2)
    fields = ndimage.gaussian_filter(rng.standard_normal((2, size, size)), sigma=(0, 4.0, 4.0))
    fields *= amp / max(np.abs(fields).max(), 1e-9)
    grid = np.indices((size, size)).astype(np.float64)
    img = ndimage.map_coordinates(img, grid + fields, order=1, mode="constant")

    # stroke weight comparable to scanned handwriting: dilate, blur lightly
    if rng.random() < 0.8:
        img = ndimage.grey_dilation(img, size=(2, 2))
    img = ndimage.gaussian_filter(img, sigma=rng.uniform(0.4, 0.8))
    peak = img.max()
    if peak > 0:
        img = np.minimum(img / peak * rng.uniform(0.9, 1.25), 1.0)
    img = img + rng.normal(0.0, rng.uniform(0.02, 0.06), img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_digits(n: int, seed: int, size: int = 28):
    """Procedurally rendered digit images in MNIST layout.

    Returns (images uint8 (n, size, size), labels uint8 (n,)); deterministic
    per seed, balanced classes.
    """
    order = np.random.default_rng(seed).permutation(np.arange(n) % 10)
    images = np.empty((n, size, size), dtype=np.uint8)
    for i, label in enumerate(order):
        img = _render_digit(int(label), np.random.default_rng((seed, i, int(label))), size)
        images[i] = np.round(img * 255.0).astype(np.uint8)
    return images, order.astype(np.uint8)


def ensure_digit_data(data_dir, n_train: int = 10000, n_test: int = 2000, seed: int = 1789) -> Path:
    """Create IDX digit files under data_dir unless they already exist."""
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    names = [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS]
    if all((data_dir / name).exists() for name in names):
        return data_dir
    train_images, train_labels = synth_digits(n_train, seed)
    test_images, test_labels = synth_digits(n_test, seed + 1)
    write_idx_images(data_dir / TRAIN_IMAGES, train_images)
    write_idx_labels(data_dir / TRAIN_LABELS, train_labels)
    write_idx_images(data_dir / TEST_IMAGES, test_images)
    write_idx_labels(data_dir / TEST_LABELS, test_labels)
    return data_dir


def resolve_data_dir(flag_value=None) -> Path:
    path = flag_value or os.environ.get(DATA_DIR_ENV)
    if not path:
        raise ValueError(f"no data directory: pass --data-dir or set {DATA_DIR_ENV}")
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"data directory does not exist: {path}")
    return path


def load_train_test(data_dir) -> tuple[Dataset, Dataset]:
    data_dir = Path(data_dir)
    train = load_mnist_idx(data_dir / TRAIN_IMAGES, data_dir / TRAIN_LABELS)
    test = load_mnist_idx(data_dir / TEST_IMAGES, data_dir / TEST_LABELS)
    return train, test


def split_shuffle(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded permutation followed by a prefix split."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(ds)
    k = int(n * train_fraction)
    if k == 0 or k == n:
        raise ValueError(f"degenerate split: {k}/{n - k} examples")
    perm = np.random.default_rng(seed).permutation(n)
    return ds.subset(perm[:k]), ds.subset(perm[k:])


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"RNCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    net: nn.NetworkParams
    seed: int = 0
    config_fingerprint: str = ""
    created: str = field(default_factory=lambda: datetime.datetime.now().isoformat(timespec="seconds"))
    version: int = CHECKPOINT_VERSION


def fingerprint(net: nn.NetworkParams) -> str:
    """Stable short identifier of an architecture + parameter vector."""
    h = hashlib.sha256()
    h.update(json.dumps([nn.spec_to_dict(s) for s in net.specs]).encode())
    h.update(json.dumps(list(net.input_shape)).encode())
    for p in net.layers:
        if p is not None:
            h.update(np.ascontiguousarray(p[0], dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(p[1], dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Versioned little-endian container; parameters stored as raw float64
    so a load reproduces them bit-exactly.

    Layout: magic "RNCK" | u16 version | u32 header length | JSON header |
    parameter arrays back to back ('<f8', weights then bias per layer).
    """
    net = ckpt.net
    header = {
        "specs": [nn.spec_to_dict(s) for s in net.specs],
        "input_shape": list(net.input_shape),
        "seed": ckpt.seed,
        "config_fingerprint": ckpt.config_fingerprint,
        "created": ckpt.created,
        "arrays": [
            None if p is None else {"w": list(p[0].shape), "b": list(p[1].shape)}
            for p in net.layers
        ],
    }
    header_bytes = json.dumps(header).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<HI", ckpt.version, len(header_bytes)))
        f.write(header_bytes)
        for p in net.layers:
            if p is not None:
                f.write(np.ascontiguousarray(p[0], dtype="<f8").tobytes())
                f.write(np.ascontiguousarray(p[1], dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 10 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointCorruptError(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack("<HI", blob[4:10])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {version}")
    if len(blob) < 10 + header_len:
        raise CheckpointCorruptError(f"{path}: truncated header")
    try:
        header = json.loads(blob[10:10 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointCorruptError(f"{path}: unreadable header ({e})") from e
    specs = tuple(nn.spec_from_dict(d) for d in header["specs"])
    input_shape = tuple(header["input_shape"])

    payload = blob[10 + header_len:]
    expected = sum(
        8 * (int(np.prod(a["w"])) + int(np.prod(a["b"])))
        for a in header["arrays"] if a is not None
    )
    if len(payload) != expected:
        raise CheckpointCorruptError(
            f"{path}: parameter payload is {len(payload)} bytes, expected {expected}"
        )
    layers = []
    off = 0
    for a in header["arrays"]:
        if a is None:
            layers.append(None)
            continue
        pair = []
        for shape_key in ("w", "b"):
            shape = tuple(a[shape_key])
            nbytes = 8 * int(np.prod(shape))
            arr = np.frombuffer(payload[off:off + nbytes], dtype="<f8").reshape(shape).copy()
            off += nbytes
            pair.append(arr)
        layers.append((pair[0], pair[1]))
    net = nn.NetworkParams(specs, input_shape, layers)
    nn.infer_shapes(specs, input_shape)
    return Checkpoint(net, header["seed"], header["config_fingerprint"], header["created"], version)
