import numpy as np
import pytest

from ipsel.data import MegaMnistSpec, generate_megamnist
from ipsel.grad.rng import StreamSet


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small dataset shared by harness-level tests: 150px, 12 train / 6 test."""
    root = tmp_path_factory.mktemp("tiny_ds")
    spec = MegaMnistSpec(image_side=150, train_count=12, test_count=6, seed=5)
    return generate_megamnist(spec, root)


@pytest.fixture()
def streams():
    return StreamSet(123)


@pytest.fixture()
def rng():
    return np.random.default_rng(987)
