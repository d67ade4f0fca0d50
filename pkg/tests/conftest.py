import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    from unroll.numkit import SeededRng
    return SeededRng(1234)


def pytest_configure(config):
    np.set_printoptions(precision=6, suppress=True)
