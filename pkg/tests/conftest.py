"""Acceptance reporting: one PASS/FAIL line per criterion in the terminal summary."""

from collections import defaultdict

import pytest

_RESULTS = defaultdict(list)


@pytest.fixture
def detail(request):
    """Attach a short measurement string to the criterion line of this test."""

    def add(text: str) -> None:
        request.node.user_properties.append(("detail", text))

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "skip" if rep.skipped else ("pass" if rep.passed else "fail")
        notes = [v for k, v in item.user_properties if k == "detail"]
        _RESULTS[marker.args[0]].append((item.name, status, notes))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        checks = _RESULTS[number]
        failed = [name for name, status, _ in checks if status == "fail"]
        skipped = [name for name, status, _ in checks if status == "skip"]
        notes = [n for _, _, ns in checks for n in ns]
        head = "FAIL" if failed else "PASS"
        parts = [f"{len(checks) - len(failed) - len(skipped)}/{len(checks)} checks"]
        if skipped:
            parts.append("skipped: " + ", ".join(skipped))
        if failed:
            parts.append("failed: " + ", ".join(failed))
        terminalreporter.write_line(
            f"{head} criterion {number}: " + "; ".join(parts + notes)
        )
