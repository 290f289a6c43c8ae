import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustnet import data, nn, training


# ---------------------------------------------------------------------------
# IDX loader
# ---------------------------------------------------------------------------

def write_pair(tmp_path, images, labels):
    ip, lp = tmp_path / "imgs", tmp_path / "labels"
    data.write_idx_images(ip, images)
    data.write_idx_labels(lp, labels)
    return ip, lp


def test_idx_round_trip_scaling(tmp_path):
    images = np.array([[[0, 255], [255, 0]], [[255, 255], [0, 0]]], dtype=np.uint8)
    labels = np.array([3, 7], dtype=np.uint8)
    ds = data.load_mnist_idx(*write_pair(tmp_path, images, labels))
    assert ds.x.shape == (2, 1, 2, 2)
    assert set(np.unique(ds.x)) == {0.0, 1.0}
    np.testing.assert_array_equal(ds.y, [3, 7])
    # normalization record inverts the transform
    raw = (ds.x - ds.offset) / ds.scale
    np.testing.assert_allclose(raw[:, 0], images, atol=1e-9)


def test_idx_bad_magic_names_file(tmp_path):
    images = np.zeros((1, 2, 2), dtype=np.uint8)
    ip, lp = write_pair(tmp_path, images, np.zeros(1, dtype=np.uint8))
    blob = bytearray(ip.read_bytes())
    blob[3] = 0x99
    ip.write_bytes(bytes(blob))
    with pytest.raises(data.IdxBadMagicError, match="imgs"):
        data.load_mnist_idx(ip, lp)


def test_idx_truncation(tmp_path):
    images = np.zeros((2, 3, 3), dtype=np.uint8)
    ip, lp = write_pair(tmp_path, images, np.zeros(2, dtype=np.uint8))
    ip.write_bytes(ip.read_bytes()[:-5])
    with pytest.raises(data.IdxTruncatedError):
        data.load_mnist_idx(ip, lp)


def test_idx_count_mismatch(tmp_path):
    ip, _ = write_pair(tmp_path, np.zeros((2, 2, 2), dtype=np.uint8), np.zeros(2, dtype=np.uint8))
    lp = tmp_path / "labels3"
    data.write_idx_labels(lp, np.zeros(3, dtype=np.uint8))
    with pytest.raises(data.IdxCountMismatchError):
        data.load_mnist_idx(ip, lp)


def test_idx_label_magic_checked(tmp_path):
    ip, lp = write_pair(tmp_path, np.zeros((1, 2, 2), dtype=np.uint8), np.zeros(1, dtype=np.uint8))
    lp.write_bytes(struct.pack(">II", 0x00000777, 1) + b"\x00")
    with pytest.raises(data.IdxBadMagicError, match="labels"):
        data.load_mnist_idx(ip, lp)


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------

def test_blobs_zero_spread_collapses_to_centers():
    ds = data.synth_blobs(5, 3, 4, spread=0.0, seed=9)
    for k in range(3):
        cluster = ds.x[ds.y == k]
        assert np.all(cluster == cluster[0])


def test_blobs_deterministic():
    a = data.synth_blobs(4, 2, 3, 0.05, seed=11)
    b = data.synth_blobs(4, 2, 3, 0.05, seed=11)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.y, b.y)


def test_blobs_learnable_by_linear_net():
    ds = data.synth_blobs(40, 3, 6, spread=0.02, seed=13)
    train, test = data.split_shuffle(ds, 0.8, seed=1)
    cfg = training.TrainConfig(epochs=20, batch_size=16, lr=0.5, momentum=0.9, seed=5)
    _, trace = training.standard_train_loop((nn.Dense(6, 3),), (6,), train, test, cfg)
    assert trace.records[-1].test_accuracy >= 0.99


def test_synth_digits_deterministic_and_balanced():
    imgs1, labels1 = data.synth_digits(50, seed=3)
    imgs2, labels2 = data.synth_digits(50, seed=3)
    np.testing.assert_array_equal(imgs1, imgs2)
    np.testing.assert_array_equal(labels1, labels2)
    assert imgs1.dtype == np.uint8 and imgs1.shape == (50, 28, 28)
    assert np.bincount(labels1, minlength=10).min() == 5


# ---------------------------------------------------------------------------
# split_shuffle
# ---------------------------------------------------------------------------

def test_split_even():
    ds = data.synth_blobs(5, 2, 3, 0.1, seed=2)
    train, test = data.split_shuffle(ds, 0.5, seed=3)
    assert len(train) == 5 and len(test) == 5


def test_split_union_is_input_multiset():
    ds = data.synth_blobs(6, 2, 3, 0.1, seed=4)
    train, test = data.split_shuffle(ds, 0.25, seed=5)
    combined = np.concatenate([train.x, test.x])
    assert sorted(map(tuple, combined)) == sorted(map(tuple, ds.x))


def test_split_seeds_differ():
    ds = data.synth_blobs(10, 2, 3, 0.1, seed=6)
    base, _ = data.split_shuffle(ds, 0.5, seed=0)
    assert any(
        not np.array_equal(data.split_shuffle(ds, 0.5, seed=s)[0].x, base.x)
        for s in range(1, 6)
    )


@given(st.floats(max_value=0.0, allow_nan=False) | st.floats(min_value=1.0, allow_nan=False))
@settings(max_examples=20)
def test_split_rejects_bad_fraction(frac):
    ds = data.synth_blobs(4, 2, 2, 0.1, seed=7)
    with pytest.raises(ValueError):
        data.split_shuffle(ds, frac, seed=0)


# ---------------------------------------------------------------------------
# Dataset invariants
# ---------------------------------------------------------------------------

def test_dataset_label_range_checked():
    with pytest.raises(ValueError):
        data.Dataset(np.zeros((2, 3)), np.array([0, 5]), num_classes=3)
    with pytest.raises(ValueError):
        data.Dataset(np.zeros((2, 3)), np.array([0]), num_classes=3)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@pytest.fixture
def ckpt():
    net = nn.init_params((nn.Conv2d(1, 2, 3, 3), nn.Relu(), nn.Dense(32, 4)), (1, 6, 6), seed=17)
    return data.Checkpoint(net, seed=17, config_fingerprint="cfg-test")


def test_checkpoint_round_trip_bitwise(ckpt, tmp_path):
    path = tmp_path / "net.rnck"
    data.save_checkpoint(ckpt, path)
    loaded = data.load_checkpoint(path)
    assert loaded.seed == 17 and loaded.config_fingerprint == "cfg-test"
    assert loaded.net.specs == ckpt.net.specs
    assert loaded.net.input_shape == ckpt.net.input_shape
    assert nn.flat_params(loaded.net).tobytes() == nn.flat_params(ckpt.net).tobytes()
    assert data.fingerprint(loaded.net) == data.fingerprint(ckpt.net)


def test_checkpoint_truncation_detected(ckpt, tmp_path):
    path = tmp_path / "net.rnck"
    data.save_checkpoint(ckpt, path)
    path.write_bytes(path.read_bytes()[:-16])
    with pytest.raises(data.CheckpointCorruptError):
        data.load_checkpoint(path)


def test_checkpoint_version_mismatch(ckpt, tmp_path):
    path = tmp_path / "net.rnck"
    data.save_checkpoint(ckpt, path)
    blob = bytearray(path.read_bytes())
    blob[4:6] = struct.pack("<H", data.CHECKPOINT_VERSION + 1)
    path.write_bytes(bytes(blob))
    with pytest.raises(data.CheckpointVersionError):
        data.load_checkpoint(path)


def test_checkpoint_bad_magic(ckpt, tmp_path):
    path = tmp_path / "net.rnck"
    data.save_checkpoint(ckpt, path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(data.CheckpointCorruptError):
        data.load_checkpoint(path)
