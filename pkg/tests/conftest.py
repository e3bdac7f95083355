import logging

import numpy as np
import pytest

from polyobs import cases
from polyobs.observer import ObserverGains, simulate
from polyobs.synthesis import CASE_STUDY_WEIGHTS, synthesize


@pytest.fixture(autouse=True)
def _quiet_clamp_warnings(caplog):
    caplog.set_level(logging.ERROR, logger="polyobs.observer")
    caplog.set_level(logging.ERROR, logger="polyobs.model")


@pytest.fixture(scope="session")
def model():
    return cases.example_model()


@pytest.fixture(scope="session")
def const_model():
    return cases.constant_descriptor_model()


@pytest.fixture(scope="session")
def cert(model):
    return synthesize(model, "thm1", CASE_STUDY_WEIGHTS)


@pytest.fixture(scope="session")
def const_cert(const_model):
    return synthesize(const_model, "thm1", CASE_STUDY_WEIGHTS)


@pytest.fixture(scope="session")
def gains(cert):
    return ObserverGains(cert)


@pytest.fixture(scope="session")
def traj1(model, gains):
    return simulate(model, gains, cases.case_study_scenario(1))


@pytest.fixture(scope="session")
def traj2(model, gains):
    return simulate(model, gains, cases.case_study_scenario(2))


@pytest.fixture(scope="session")
def sigma_lower(model):
    from polyobs.model import min_singular_value_E

    return min_singular_value_E(model)[0]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(module.RESULTS, key=lambda s: s.split(":")[0][-2:]):
        terminalreporter.write_line(line)
