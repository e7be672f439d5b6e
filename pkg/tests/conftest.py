"""Shared fixtures for the test suite.

Session-scoped fixtures hold the default configuration and a couple of
solver products that several modules reuse; building them once keeps the
suite fast because solver output is deterministic for a fixed setup.
"""

import numpy as np
import pytest

from hiersim.config import GlacierConfig, InferenceSettings
from hiersim.sia import default_site_indices, solve_sia


@pytest.fixture(scope="session")
def cfg():
    """Default glacier configuration."""
    return GlacierConfig()


@pytest.fixture(scope="session")
def settings():
    """Default observation and inference settings."""
    return InferenceSettings()


@pytest.fixture(scope="session")
def sites(cfg, settings):
    """Flat indices of the default 25 observation sites."""
    return default_site_indices(cfg, settings.site_offsets)


@pytest.fixture(scope="session")
def short_trajectory(cfg):
    """A 100-step solver run at the true softness, shared read-only."""
    return solve_sia(cfg, 100)


@pytest.fixture(scope="session")
def rng_factory():
    """Fresh deterministic generators so tests never share RNG state."""

    def make(seed: int) -> np.random.Generator:
        return np.random.default_rng(seed)

    return make
