import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))


@pytest.fixture
def tmp_out(tmp_path):
    return tmp_path / "out"


def pytest_configure(config):
    config._acceptance = {}


@pytest.fixture
def criterion(request):
    """Record one pass/fail line per acceptance criterion (printed in the terminal summary)."""
    book = request.config._acceptance

    def record(number: int, passed: bool, message: str):
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {message}"
        book[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    book = getattr(config, "_acceptance", {})
    if book:
        terminalreporter.section("acceptance criteria")
        for k in sorted(book):
            terminalreporter.write_line(book[k])
