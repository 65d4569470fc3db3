import pytest

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and not rep.failed and not rep.skipped):
        return
    number, title = marker.args
    status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
    prev = _CRITERIA.get(number, (title, "PASS"))[1]
    if prev == "FAIL" or (prev == "SKIP" and status == "PASS"):
        status = prev
    _CRITERIA[number] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {title}")
