import pytest

from famix.datasets import make_synthetic_corpus
from famix.encoders import build_desk_encoder


@pytest.fixture(scope="session")
def desk_encoder():
    return build_desk_encoder(0)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """16 train / 8 val / 8 shifted images of 64x64, four classes."""
    return make_synthetic_corpus(tmp_path_factory.mktemp("corpus"), n_train=16, n_val=8, seed=3)
