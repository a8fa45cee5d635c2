import pytest

_results: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    number, title = marker.args
    entry = _results.setdefault(number, {"title": title, "passed": True, "details": []})
    if rep.failed:
        entry["passed"] = False
    if rep.when == "call":
        entry["details"].extend(v for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        e = _results[number]
        status = "PASS" if e["passed"] else "FAIL"
        detail = "; ".join(e["details"])
        terminalreporter.write_line(f"[{status}] criterion {number}: {e['title']}" + (f" ({detail})" if detail else ""))
