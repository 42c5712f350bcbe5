import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "ci", deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_synth():
    """A small synthetic dataset for fast pipeline tests."""
    from cite.config import SynthConfig
    from cite.data import gen_synthetic

    cfg = SynthConfig(images=48, regions_per_image=6, phrases_per_image=3,
                      proposals_per_image=10, d_v=12, d_t=12, seed=11)
    return gen_synthetic(cfg)
