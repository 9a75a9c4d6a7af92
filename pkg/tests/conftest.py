import pytest
from hypothesis import settings

from powermdp.params import SystemParams

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile("ci")

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record one verdict line per acceptance criterion for the summary."""

    def record(number: int, passed: bool, detail: str) -> None:
        ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        print(ACCEPTANCE_LINES[number])

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture
def p30():
    return SystemParams(C=40, Q=10, lam=30.0, mu=1.0, gamma=2.0, c_perf=50.0)


@pytest.fixture
def small():
    return SystemParams(C=6, Q=4, lam=3.0, mu=1.0, gamma=2.0, c_perf=50.0)
