from pathlib import Path

import pytest

from dqplan.level_codec import parse_level

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def dense_text():
    return (DATA / "boulder_dense.txt").read_text()


@pytest.fixture(scope="session")
def dense_level(dense_text):
    return parse_level(dense_text, "BoulderDash")


def level(text, game="BoulderDash"):
    """Parse a dedented multi-line literal."""
    lines = [ln.strip() for ln in text.strip().splitlines()]
    return parse_level("\n".join(lines), game)


# acceptance summary ------------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
