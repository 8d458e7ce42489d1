"""Shared pytest configuration.

Acceptance tests carry the `criterion` marker; a terminal-summary hook
prints one PASS/FAIL line per criterion at the end of the run.
"""

import pytest
import torch

torch.set_num_threads(1)

_CRITERION_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "criterion(number, label): acceptance criterion checked by this test",
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    number = marker.args[0]
    label = marker.args[1] if len(marker.args) > 1 else item.name
    # keep the worst outcome if a criterion spans several tests
    passed = report.passed and _CRITERION_RESULTS.get(number, (True, label))[0]
    _CRITERION_RESULTS[number] = (passed, label)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERION_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERION_RESULTS):
        passed, label = _CRITERION_RESULTS[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  {label}")
