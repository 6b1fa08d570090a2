import pytest

from kvlab.model import ModelConfig, PlantSpec, build_model
from kvlab.plants import build_lab_model

PLANTED = tuple((l, h) for l in (0, 1) for h in range(4)) + ((10, 0), (11, 0))

# acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture(scope="session")
def random_model():
    return build_model(ModelConfig(seed=0))


@pytest.fixture(scope="session")
def planted_model():
    return build_model(ModelConfig(seed=0), PlantSpec(heads=PLANTED, seed=3))


@pytest.fixture(scope="session")
def lab():
    return build_lab_model(0)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
