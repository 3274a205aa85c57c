import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=300)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def model():
    from articmpc.model import default_model

    return default_model()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_state(model, rng, spread=1.0):
    x = np.zeros(model.nx)
    x[:2] = rng.uniform(-2, 2, 2)
    x[2] = rng.uniform(-np.pi, np.pi)
    lo, hi = model.q_lower, model.q_upper
    mid = 0.5 * (lo + hi)
    x[3:] = mid + spread * 0.5 * (hi - lo) * rng.uniform(-0.9, 0.9, model.n_joints)
    return x


# acceptance verdict lines, repeated at the end of the run
CRITERIA = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA):
            terminalreporter.write_line(line)
