import pytest

ACCEPTANCE_MODULE = "test_acceptance"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    """Print one PASS/FAIL line per acceptance check, even without -s."""
    outcome = yield
    report = outcome.get_result()
    if report.when != "call" or not item.module.__name__.endswith(ACCEPTANCE_MODULE):
        return
    label = item.name.removeprefix("test_").replace("_", "-")
    verdict = "PASS" if report.passed else "FAIL"
    tr = item.config.pluginmanager.get_plugin("terminalreporter")
    if tr is not None:
        tr.ensure_newline()
        tr.write_line(f"[{verdict}] {label}")
