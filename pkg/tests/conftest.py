import numpy as np
import pytest
from hypothesis import HealthCheck, settings

# The suite runs on slow shared CPU boxes; wall-clock deadlines only flake.
settings.register_profile(
    "histobench",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
    max_examples=50,
)
settings.load_profile("histobench")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
