import pytest

from _instances import tiny1, tiny1_polyhedron


@pytest.fixture
def tiny():
    return tiny1()


@pytest.fixture
def tiny_p():
    return tiny1_polyhedron()


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Collects one line per acceptance criterion, printed in the terminal summary."""
    return ACCEPTANCE_LINES.append


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
