import numpy as np
import pytest

from viscotbench.imagecore import make_rng


@pytest.fixture
def rng():
    return make_rng(0)


@pytest.fixture
def random_image(rng):
    return rng.random((24, 20, 3))


@pytest.fixture
def mid_gray():
    return np.full((64, 64, 3), 0.5)
