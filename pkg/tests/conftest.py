import pytest

_LINES: dict[int, str] = {}


def _line(number: int, title: str, ok: bool, detail: str) -> str:
    return f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")


@pytest.fixture
def criterion(request):
    """Record a pass/fail line for the acceptance criterion named by the test's marker."""
    marker = request.node.get_closest_marker("criterion")
    number, title = marker.args

    def record(ok: bool, detail: str = ""):
        _LINES[number] = _line(number, title, ok, detail)
        print(_LINES[number])
        assert ok, f"criterion {number} failed: {detail}"

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker and report.when == "call" and report.failed and marker.args[0] not in _LINES:
        _LINES[marker.args[0]] = _line(*marker.args, False, f"error: {call.excinfo.typename}")


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_LINES):
            terminalreporter.write_line(_LINES[number])
