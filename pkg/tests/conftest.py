import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from matdecomp import GaussianLight, Illumination, Material, NormalMap
from matdecomp.bench import make_shape

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def pytest_addoption(parser):
    parser.addoption("--skip-slow", action="store_true", help="skip the long end-to-end checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--skip-slow"):
        skip = pytest.mark.skip(reason="--skip-slow")
        for item in items:
            if "slow" in item.keywords:
                item.add_marker(skip)


def sky(level=1.0):
    sh = np.zeros((9, 3))
    sh[0] = level / 0.28209479177387814
    return sh


def shape(name, res):
    mask, n = make_shape(name, res)
    return NormalMap.from_vectors(mask, n)


@pytest.fixture(scope="session")
def sphere16():
    return shape("sphere", 16)


@pytest.fixture(scope="session")
def sphere24():
    return shape("sphere", 24)


@pytest.fixture
def lit():
    """One lobe up-right-front plus a faint tinted sky."""
    sh = sky(0.3)
    sh[2] = [0.05, 0.04, 0.03]
    return Illumination((GaussianLight(0.6, 0.5, 4.0, 40.0, 5.0, 0.3),), sh)


@pytest.fixture
def glossy():
    return Material(0.6, 0.4, 0.3, 0.4, 0.3)


# -- acceptance reporting ----------------------------------------------------------------

ACCEPTANCE_LINES = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records a PASS/FAIL line and returns ``ok``."""
    def record(n, ok, detail):
        ACCEPTANCE_LINES[n] = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
