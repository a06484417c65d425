def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance verdict lines outside pytest's output capture."""
    try:
        from test_acceptance import CRITERION_LINES
    except Exception:
        return
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.write_line(line)
