"""Shared fixtures plus a per-criterion pass/fail summary for the acceptance suite."""

import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.fixture
def criterion_note(request):
    """Attach a measured value to the criterion line printed at the end of the run."""
    marker = request.node.get_closest_marker("criterion")
    number = marker.args[0] if marker else None

    def note(text: str):
        if number is not None:
            _RESULTS.setdefault(number, {"title": marker.args[1], "ok": True, "notes": []})
            _RESULTS[number]["notes"].append(text)
    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when == "teardown":
        return
    if report.when == "setup" and report.passed:
        return
    entry = _RESULTS.setdefault(marker.args[0], {"title": marker.args[1], "ok": True, "notes": []})
    entry["ok"] = entry["ok"] and report.passed


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        entry = _RESULTS[number]
        status = "PASS" if entry["ok"] else "FAIL"
        notes = "; ".join(entry["notes"])
        line = f"criterion {number}: {status}  {entry['title']}"
        terminalreporter.write_line(line + (f"  [{notes}]" if notes else ""))
