from pathlib import Path

import pytest

from shortfall_ld.model import load_scenario

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def scenario_path(name: str) -> Path:
    return SCENARIOS / f"{name}.toml"


@pytest.fixture(scope="session")
def s1():
    return load_scenario(scenario_path("s1"))


@pytest.fixture(scope="session")
def s1_affine():
    return load_scenario(scenario_path("s1_affine_1d"))


@pytest.fixture(scope="session")
def saturating():
    return load_scenario(scenario_path("saturating_1d"))


@pytest.fixture(scope="session")
def slow_factor():
    return load_scenario(scenario_path("slow_factor"))


@pytest.fixture(scope="session")
def unstable():
    return load_scenario(scenario_path("s1_unstable"))


@pytest.fixture(scope="session")
def zero_beta():
    return load_scenario(scenario_path("zero_beta"), allow_zero_beta=True)


def pytest_terminal_summary(terminalreporter):
    import acceptance_report

    if not acceptance_report.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance_report.summary():
        terminalreporter.write_line(line)
