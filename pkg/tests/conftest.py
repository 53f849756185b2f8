def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in sorted(RESULTS.items()):
        terminalreporter.write_line(f"{name}: {'PASS' if ok else 'FAIL'}  {detail}")
