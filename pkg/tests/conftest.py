"""Collects ``@pytest.mark.criterion(k, title)`` outcomes into one verdict line per criterion."""
import pytest

_VERDICTS: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion a test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and report.passed):
        return
    number, title = mark.args
    entry = _VERDICTS.setdefault(number, {"title": title, "ok": True, "failed": []})
    if not report.passed:
        entry["ok"] = False
        entry["failed"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        v = _VERDICTS[number]
        line = f"criterion {number}: {'PASS' if v['ok'] else 'FAIL'}  {v['title']}"
        if v["failed"]:
            line += f"  (failed: {', '.join(v['failed'])})"
        terminalreporter.write_line(line)
