ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    # one verdict line per acceptance criterion, visible without -s
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
