"""Collects the PASS/FAIL lines emitted by the acceptance tests and prints
them in the terminal summary, so they show up even when output is captured."""

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
