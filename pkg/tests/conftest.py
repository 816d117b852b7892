def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    numbered = sorted(k for k in RESULTS if isinstance(k, int))
    if not numbered:
        return
    terminalreporter.section("acceptance criteria")
    for k in numbered:
        terminalreporter.write_line(f"criterion {k:2d}: {RESULTS[k].line()}")
