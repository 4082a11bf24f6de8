import numpy as np
import pytest

from winoq.data_io import gen_synthetic


@pytest.fixture(scope="session")
def synth_small():
    """4-class oriented-grating set, small enough for fast unit tests."""
    return gen_synthetic(4, 64, 16, seed=0)


@pytest.fixture(scope="session")
def synth_split(synth_small):
    return synth_small.split(0.1, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
