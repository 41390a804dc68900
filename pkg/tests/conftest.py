"""Collects one PASS/FAIL verdict per acceptance criterion and prints them after the run."""

import pytest

VERDICTS = {}
NOTES = {}
# verdicts of logged (non-gating) criteria, set by the test itself
LOGGED = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    num, title = marker.args
    ok = VERDICTS.get(num, (title, True))[1] and rep.passed
    VERDICTS[num] = (title, ok)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, title): acceptance criterion covered by the test")


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(VERDICTS):
        title, ok = VERDICTS[num]
        ok = LOGGED.get(num, ok)
        line = f"criterion {num:2d} {title}: {'PASS' if ok else 'FAIL'}"
        if num in NOTES:
            line += f"  [{NOTES[num]}]"
        terminalreporter.write_line(line)
