import sys

import pytest

from durations.scenarios import TrialDesign, generate_dataset
from durations.streams import make_stream


@pytest.fixture(scope="session")
def design():
    return TrialDesign.default()


@pytest.fixture(scope="session")
def s1_data(design):
    return generate_dataset(1, design, make_stream(2024, 1))


@pytest.fixture(scope="session")
def s4_data(design):
    return generate_dataset(4, design, make_stream(2024, 4))


def big_dataset(scenario, n_total, seed=99):
    return generate_dataset(scenario, TrialDesign.default(n_total), make_stream(seed, scenario))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
