import re

CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_results: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    match = CRITERION.search(report.nodeid)
    if not match:
        return
    entry = _results.setdefault(int(match.group(1)), {"name": match.group(2).replace("_", " "), "ok": True, "detail": ""})
    if report.failed or (report.when == "call" and report.skipped):
        entry["ok"] = False
    for key, value in report.user_properties:
        if key == "detail":
            entry["detail"] = value


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        entry = _results[number]
        status = "PASS" if entry["ok"] else "FAIL"
        detail = f"  [{entry['detail']}]" if entry["detail"] else ""
        terminalreporter.write_line(f"criterion {number:2d} {status}  {entry['name']}{detail}")
