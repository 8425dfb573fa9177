import acceptance_runs


def pytest_terminal_summary(terminalreporter):
    if acceptance_runs.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_runs.RESULTS:
            terminalreporter.write_line(line)
