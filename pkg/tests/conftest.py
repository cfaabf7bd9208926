import numpy as np
import pytest

from s2m2.data import generate_synthetic, make_splits
from s2m2.model import Backbone, CosineClassifier, FewShotModel, RotationHead


@pytest.fixture(scope="session")
def toy_dataset():
    return generate_synthetic(seed=0)


@pytest.fixture(scope="session")
def toy_splits():
    return make_splits(16, (8, 3, 5), seed=0)


@pytest.fixture
def tiny_backbone():
    return Backbone((1, 8, 8), channels=(2, 3, 4, 4), strides=(2, 1, 2, 1), seed=1)


@pytest.fixture
def tiny_model(tiny_backbone):
    return FewShotModel(tiny_backbone, CosineClassifier(3, 4, seed=2), RotationHead(4, 4, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
