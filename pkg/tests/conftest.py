import numpy as np
import pytest

from ivqa import autodiff as ad


@pytest.fixture(autouse=True)
def _default_precision():
    # every test starts and ends in the 32-bit default
    ad.set_precision(32)
    yield
    ad.set_precision(32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
