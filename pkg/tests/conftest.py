import os
import re

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_ACCEPTANCE = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    label = marker.args[0]
    _ACCEPTANCE[label] = call.excinfo is None and _ACCEPTANCE.get(label, True)


def _order(label):
    m = re.match(r"AC(\d+)(\w*)", label)
    return (int(m.group(1)), m.group(2)) if m else (10**6, label)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_ACCEPTANCE, key=_order):
        terminalreporter.write_line(f"{'PASS' if _ACCEPTANCE[label] else 'FAIL'} {label}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
