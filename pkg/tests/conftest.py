import numpy as np
import pytest

from mocaps.tensor import RngState


@pytest.fixture
def rng():
    return RngState(1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(20240611)
