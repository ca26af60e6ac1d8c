import numpy as np
import pytest

from hoflow.harness import default_camera, default_trajectory, generate_sequence


@pytest.fixture(scope="session")
def cam():
    return default_camera()


@pytest.fixture(scope="session")
def seq(cam):
    """Default 30-frame synthetic sequence, seed 0."""
    return generate_sequence(default_trajectory(cam, 0), 0, cam)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance outcomes, filled by test_acceptance.py and echoed after the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
