"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

from collections import defaultdict

import pytest

_RESULTS: dict[int, list[tuple[str, str, str]]] = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): test belongs to acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    detail = dict(item.user_properties).get("detail", "")
    if not rep.passed and not detail:
        detail = str(call.excinfo.value).split("\n")[0] if call.excinfo else ""
    _RESULTS[mark.args[0]].append((item.name, rep.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        parts = _RESULTS[n]
        status = "PASS" if all(o == "passed" for _, o, _ in parts) else "FAIL"
        details = "; ".join(f"{name}: {d}" if d else name for name, _, d in parts)
        terminalreporter.write_line(f"criterion {n:2d}: {status}  ({details})")
