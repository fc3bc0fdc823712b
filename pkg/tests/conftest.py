from __future__ import annotations

import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------- acceptance summary

_criteria: dict[int, dict] = {}
_notes: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion a test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "failed": False, "passed": 0})
    if rep.failed:
        entry["failed"] = True
    elif rep.when == "call" and rep.passed:
        entry["passed"] += 1


@pytest.fixture
def note():
    """Append a line to the acceptance summary printed at the end of the session."""
    return _notes.append


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        status = "FAIL" if e["failed"] else ("PASS" if e["passed"] else "SKIP")
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {e['title']}")
    for line in _notes:
        terminalreporter.write_line(f"  note: {line}")
