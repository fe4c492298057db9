"""Replays acceptance verdict lines after the run; capture would otherwise
swallow them for passing tests."""

VERDICTS: list = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
