import numpy as np
import pytest

from mtlkit.data import GenConfig, generate_synthetic, load_dataset

# small enough to train in well under a second per epoch, big enough that
# every country class appears in every split
TINY_GEN = dict(n_train=60, n_val=20, n_test=20, height=32, width=48, seed=11)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_data")
    return generate_synthetic(GenConfig(**TINY_GEN), out)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_manifest):
    return load_dataset(tiny_manifest)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
