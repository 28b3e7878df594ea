import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from daegan.tensor import default_dtype

settings.register_profile("default", max_examples=30, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """3 videos x 12 frames at 32 px."""
    from daegan.synthdata import gen_dataset
    root = tmp_path_factory.mktemp("corpus")
    return gen_dataset(3, 12, 32, 5, root)
