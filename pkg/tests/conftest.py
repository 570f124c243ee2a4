import numpy as np
import pytest
from hypothesis import settings

from hgpmpc.environments import fit_env_model, lti_env, quad2d_env

settings.register_profile("pkg", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("pkg")


@pytest.fixture(scope="session")
def lti():
    return lti_env()


@pytest.fixture(scope="session")
def lti_fit(lti):
    return fit_env_model(lti, 200, seed=0)


@pytest.fixture(scope="session")
def lti_model(lti_fit):
    return lti_fit[0]


@pytest.fixture(scope="session")
def quad():
    return quad2d_env()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, repeated at the end of the run
AC_RESULTS: list = []


def pytest_terminal_summary(terminalreporter):
    if AC_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(AC_RESULTS):
            terminalreporter.write_line(line)
