import re

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")
_outcomes: dict = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    number = int(m.group(1))
    if report.failed or report.when == "call" or number not in _outcomes:
        seconds = report.duration if report.when == "call" else 0.0
        _outcomes[number] = (m.group(2).replace("_", " "), "FAIL" if report.failed else "PASS", seconds)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        name, verdict, seconds = _outcomes[number]
        terminalreporter.write_line(f"criterion {number:2d} {verdict}  {name} ({seconds:.1f} s)")
