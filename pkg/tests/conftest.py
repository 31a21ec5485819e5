def pytest_terminal_summary(terminalreporter):
    from tests import test_acceptance  # noqa: F401  (only populated when collected)

    results = getattr(test_acceptance, "RESULTS", {})
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
