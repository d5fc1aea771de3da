"""Per-criterion PASS/FAIL reporting for the acceptance suite."""

import pytest

CRITERIA = {
    1: "gradient suite",
    2: "zero-mask annihilation",
    3: "modal proportion properties",
    4: "overfit convergence",
    5: "modal-contribution direction",
    6: "robustness ordering",
    7: "loss identities",
    8: "metric self-tests",
    9: "checkpoint round-trip",
}

_outcomes: dict[int, list[bool]] = {}
_details: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion this test decides")


@pytest.fixture
def record(request):
    """Attach a measured-value note to the criterion of the calling test."""
    marker = request.node.get_closest_marker("criterion")

    def add(text: str) -> None:
        if marker is not None:
            _details.setdefault(marker.args[0], []).append(text)

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        _outcomes.setdefault(marker.args[0], []).append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        runs = _outcomes.get(n)
        if runs is None:
            status = "NOT RUN"
        else:
            status = "PASS" if all(runs) else "FAIL"
        line = f"criterion {n} [{name}]: {status}"
        if _details.get(n):
            line += "  (" + "; ".join(_details[n]) + ")"
        terminalreporter.write_line(line)
