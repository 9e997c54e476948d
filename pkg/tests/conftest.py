import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# acceptance criterion name -> list of (test id, outcome)
_criteria: dict[str, list[tuple[str, str]]] = {}


def _criterion(item):
    m = item.get_closest_marker("criterion")
    return m.args[0] if m else None


def pytest_deselected(items):
    for item in items:
        name = _criterion(item)
        if name:
            _criteria.setdefault(name, []).append((item.nodeid, "not run"))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    name = _criterion(item)
    if name and (rep.when == "call" or not rep.passed):
        status = "passed" if rep.passed else ("not run" if rep.skipped else "failed")
        _criteria.setdefault(name, []).append((item.nodeid, status))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, results in _criteria.items():
        statuses = {s for _, s in results}
        if "failed" in statuses:
            verdict = "FAIL"
        elif statuses == {"passed"}:
            verdict = "PASS"
        else:
            verdict = "NOT RUN"
        terminalreporter.write_line(f"{verdict:7s} {name}")
