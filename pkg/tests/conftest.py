import numpy as np
import pytest

from delaycomp.dynamics import make_plant

PLANT_NAMES = ("scalar", "integrator", "pendulum", "manipulator")


@pytest.fixture(params=PLANT_NAMES)
def any_plant(request):
    return make_plant(request.param)


@pytest.fixture
def scalar():
    return make_plant("scalar")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
