import numpy as np
import pytest

from dsmpnn.darcy import gen_dataset


@pytest.fixture(scope="session")
def darcy32():
    """Eight small Darcy samples shared by the integration tests."""
    return gen_dataset(8, 32, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
