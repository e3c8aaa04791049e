import numpy as np
import pytest

from reflsde.fields import make_drift
from reflsde.geometry import disk, interval
from reflsde.flows import DirectionField
from reflsde.testfns import build_H
from reflsde.zvonkin import ConstantsLedger, build_transform, solve_kappa, solve_theta1

COARSE = {"h": 2.0**-5, "n_angle": 64}


@pytest.fixture(scope="session")
def disk_zero_transform():
    tr, sol = build_transform(make_drift(disk(1.0), "zero"), 1.0 / 16, **COARSE)
    return tr


@pytest.fixture(scope="session")
def disk_sign_transform():
    tr, sol = build_transform(make_drift(disk(1.0), "sign1d", bound=2.0), 1.0 / 16, **COARSE)
    return tr


@pytest.fixture(scope="session")
def interval_sign_transform():
    tr, sol = build_transform(make_drift(interval(0.0, 1.0), "sign1d", bound=2.0), 1.0 / 16)
    return tr


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def identity_H(disk_zero_transform):
    theta0 = np.pi / 3
    led = ConstantsLedger()
    led.set("theta0", theta0, "fitted")
    th1 = solve_theta1(theta0)
    led.set("theta1", th1, "verified")
    led.set("kappa", solve_kappa(th1, theta0), "verified")
    return build_H(DirectionField(disk_zero_transform), led, delta5=0.1, bump_radius=0.05)


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
