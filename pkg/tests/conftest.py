import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def gbm():
    from bubbledetect.model_zoo import DisplacedCev
    return DisplacedCev(sigma=0.2, beta=1.0, d=0.0, x0=2.0)


@pytest.fixture
def small_grid():
    from bubbledetect.surfaces import SurfaceGrid
    return SurfaceGrid(np.linspace(1.0, 2.0, 6), np.linspace(1.8, 2.3, 7))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
