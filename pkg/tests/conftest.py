import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from protoargnet import shapes  # noqa: E402


@pytest.fixture(scope="session")
def shapes10k():
    return shapes.generate(7, 10000)


@pytest.fixture(scope="session")
def shapes_small():
    return shapes.generate(3, 400)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number, passed: bool, detail: str) -> None:
    """Collect one verdict line; all lines are printed in the terminal summary."""
    ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}")
    print(ACCEPTANCE_LINES[-1])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
