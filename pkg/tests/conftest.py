import pytest

_CRITERIA: dict[int, tuple[str, bool]] = {}
_NOTES: list[str] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when != "call" and not report.failed:
        return
    number, title = marker.args
    _, ok = _CRITERIA.get(number, (title, True))
    _CRITERIA[number] = (title, ok and report.passed)


@pytest.fixture(scope="session")
def acceptance_notes():
    """Lines appended here are printed after the criterion summary."""
    return _NOTES


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title}")
    for line in _NOTES:
        terminalreporter.write_line(line)
