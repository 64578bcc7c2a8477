"""Prints one pass/fail line per acceptance criterion at the end of the run."""

import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        details = [str(v) for k, v in item.user_properties if k == "detail"]
        _RESULTS[number] = (title, report.outcome, "; ".join(details))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, outcome, detail = _RESULTS[number]
        status = "PASS" if outcome == "passed" else "FAIL"
        line = f"[{status}] criterion {number}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
