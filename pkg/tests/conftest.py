import os
from pathlib import Path

import numpy as np
import pytest

from robustnet import data, nn

REPO_ROOT = Path(__file__).resolve().parent.parent


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_net():
    """Small composed net exercising every layer kind on a 6x6 input."""
    specs = (nn.Conv2d(2, 3, 3, 3), nn.Relu(), nn.MaxPool(2, 2),
             nn.Dense(12, 5), nn.Relu(), nn.Dense(5, 4))
    return nn.init_params(specs, (2, 6, 6), seed=7)


@pytest.fixture(scope="session")
def digit_data_dir(tmp_path_factory):
    """IDX digit data for desk-scale runs.

    Honors ROBUSTNET_DATA_DIR when it already holds the four IDX files
    (e.g. real MNIST); otherwise renders the synthetic digit set once into
    a repo-local cache so repeated test runs reuse it.
    """
    env = os.environ.get(data.DATA_DIR_ENV)
    names = [data.TRAIN_IMAGES, data.TRAIN_LABELS, data.TEST_IMAGES, data.TEST_LABELS]
    if env and all((Path(env) / n).exists() for n in names):
        return Path(env)
    return data.ensure_digit_data(REPO_ROOT / "data", n_train=10000, n_test=2000, seed=1789)


@pytest.fixture(scope="session")
def desk_data(digit_data_dir):
    train, test = data.load_train_test(digit_data_dir)
    return train.head(10000), test.head(2000)
