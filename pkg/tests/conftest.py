import numpy as np
import pytest

ACCEPTANCE_RESULTS = []


def record_criterion(number, title, passed, detail):
    ACCEPTANCE_RESULTS.append((number, title, bool(passed), detail))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(
            f"criterion {number:>2} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
