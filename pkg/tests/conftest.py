import os

import pytest

from spillbound.simulate import baseline_config, simulate

# one PASS/FAIL line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def small_sim():
    cfg = baseline_config(n_units=80, n_periods=12, adopt_window=(3, 8), seed=11)
    return simulate(cfg)


@pytest.fixture(scope="session")
def baseline_sim():
    return simulate(baseline_config(seed=3))


@pytest.fixture(scope="session")
def noiseless_sim():
    return simulate(baseline_config(seed=5).noiseless())


@pytest.fixture(scope="session")
def workers():
    return max(1, min(4, os.cpu_count() or 1))
