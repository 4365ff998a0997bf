"""Collects one result line per acceptance criterion and prints them at the end."""

import pytest

CRITERIA = {}


@pytest.fixture
def criterion():
    """``criterion(number, name, passed, detail)`` records a result line."""

    def record(number, name, passed, detail=""):
        CRITERIA[number] = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2} {name}: {detail}"
        print(CRITERIA[number])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[number])
