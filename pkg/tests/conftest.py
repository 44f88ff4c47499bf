"""Shared test plumbing: the acceptance suite reports one line per criterion."""

import pytest

acceptance_lines: list[str] = []


@pytest.fixture(scope="session")
def criterion_report():
    """Collect one pass/fail line per criterion for the terminal summary."""

    def report(line: str) -> None:
        acceptance_lines.append(line)
        print(line)

    return report


def pytest_terminal_summary(terminalreporter):
    if not acceptance_lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance_lines:
        terminalreporter.write_line(line)
