import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ffreedg.synthdata import make_benchmark

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_bench():
    """A benchmark small enough for multi-round runs inside unit tests."""
    return make_benchmark(3, n_source=24, n_eval=6, n_clients=6, imgs_per_client=4, h=6, w=6)
