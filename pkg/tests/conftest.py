"""Collects one outcome line per acceptance criterion for the terminal summary."""

import pytest

_CRITERIA: dict = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    n = int(name.split("_")[2])
    entry = _CRITERIA.setdefault(n, {"name": name, "passed": True, "detail": ""})
    if report.failed or (report.when == "call" and not report.passed):
        entry["passed"] = False
    for key, text in report.user_properties:
        if key == "detail":
            entry["detail"] = text


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["passed"] else "FAIL"
        terminalreporter.write_line(f"CRITERION {n}: {status}  {e['name']}  {e['detail']}")


@pytest.fixture
def detail(record_property):
    """Attach a one-line measurement summary to the current criterion."""

    def _set(text):
        record_property("detail", text)

    return _set
