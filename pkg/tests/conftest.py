from __future__ import annotations

import pytest
from hypothesis import HealthCheck, settings

from glidemini.credentials import init_authority

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def authority():
    return init_authority(None, seed=7)


@pytest.fixture
def other_authority():
    return init_authority(None, seed=8)
