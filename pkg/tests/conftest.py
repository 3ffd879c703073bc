import pytest

from pmmw_detr import tensor as T

CRITERIA_LINES = []


@pytest.fixture(autouse=True)
def float64_mode():
    """Every test starts in 64-bit, grad-enabled mode."""
    T.set_precision("float64")
    yield
    T.set_precision("float64")


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion for the terminal summary."""

    def record(number: int, name: str, passed: bool, detail: str) -> bool:
        line = f"criterion {number} ({name}): {'PASS' if passed else 'FAIL'} | {detail}"
        CRITERIA_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES):
            terminalreporter.write_line(line)
