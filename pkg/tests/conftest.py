"""Per-criterion PASS/FAIL summary for the acceptance suite."""

import pytest

_results: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    report = outcome.get_result()
    n = mark.args[0]
    entry = _results.setdefault(n, {"text": mark.args[1] if len(mark.args) > 1 else "", "ok": True,
                                    "seconds": 0.0, "tests": set()})
    entry["seconds"] += report.duration  # setup time counts: module fixtures do the training
    entry["tests"].add(item.nodeid)
    if report.failed or (report.when == "call" and report.skipped):
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_results):
        e = _results[n]
        verdict = "PASS" if e["ok"] else "FAIL"
        tr.write_line(f"criterion {n:>2}: {verdict}  ({len(e['tests'])} checks, {e['seconds']:.1f} s)  {e['text']}")
