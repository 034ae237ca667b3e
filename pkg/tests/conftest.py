import os
import re
import sys

sys.path.insert(0, os.path.dirname(__file__))

_CRITERIA = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_c(\d+)_", report.nodeid)
    if not m or (report.when != "call" and report.passed):
        return
    detail = dict(report.user_properties).get("verdict", "")
    prev = _CRITERIA.get(int(m.group(1)))
    if prev is None or prev[0]:
        _CRITERIA[int(m.group(1))] = (report.passed, detail or (prev[1] if prev else "") or report.when + " error")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
