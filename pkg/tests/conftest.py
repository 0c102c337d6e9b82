import numpy as np
import pytest

from ctml import _backend
from ctml.geometry import fan_geometry, parallel_geometry

BACKENDS = _backend.available()


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["parallel", "fan"])
def small_geom(request):
    if request.param == "parallel":
        return parallel_geometry(32, 24, angular_range=(0.0, 180.0))
    return fan_geometry(32, 24, 48)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects the one-line criterion verdicts printed at the end of the run."""
    return request.config.stash.setdefault(_ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
