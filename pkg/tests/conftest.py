import os

import pytest

ACCEPTANCE_LINES = []


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end training runs")


@pytest.fixture
def record_criterion():
    """Record a one-line verdict for an acceptance criterion."""

    def record(number, name, passed, detail):
        line = f"criterion {number} [{name}]: {'PASS' if passed else 'FAIL'} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def pytest_report_header(config):
    from oavnn import _accel

    flag = os.environ.get("OAVNN_DISABLE_NUMBA", "")
    return f"oavnn kernel backend: {_accel.backend()} (OAVNN_DISABLE_NUMBA={flag!r})"
