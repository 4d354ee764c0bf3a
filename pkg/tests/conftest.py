import numpy as np
import pytest

from weedbot.config import default_scenario


@pytest.fixture
def scenario():
    return default_scenario(seed=11)


@pytest.fixture
def quiet_scenario():
    """Scenario with all sensor noise off, for analytic oracles."""
    cfg = default_scenario(seed=11)
    cfg.noise.gnss_sigma = 0.0
    cfg.noise.gyro_sigma = 0.0
    cfg.noise.compass_sigma = 0.0
    cfg.noise.force_sigma = 0.0
    return cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
