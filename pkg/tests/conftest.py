import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_smooth(spec, rng, n_terms=6):
    """Random smooth function: a few Gaussians with random centers, widths and signs."""
    x = spec.points
    out = np.zeros_like(x)
    for _ in range(n_terms):
        c = rng.uniform(spec.x_min / 2, spec.x_max / 2)
        w = rng.uniform(0.3, 2.0)
        out += rng.normal() * np.exp(-((x - c) ** 2) / (2 * w**2))
    return out
