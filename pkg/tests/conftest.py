import re

import numpy as np
import pytest

from branchnet.data import make_blobs

_ACCEPTANCE = []


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None or call.when != "call":
        return
    label = marker.args[0] if marker.args else item.name
    if call.excinfo is None:
        outcome = "PASS"
    elif call.excinfo.errisinstance(pytest.skip.Exception):
        outcome = "SKIP"
    else:
        outcome = "FAIL"
    _ACCEPTANCE.append((label, outcome))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    def key(item):
        m = re.match(r"AC(\d+)(.*)", item[0])
        return (int(m.group(1)), m.group(2)) if m else (10**6, item[0])

    for label, outcome in sorted(_ACCEPTANCE, key=key):
        terminalreporter.write_line(f"[{outcome}] {label}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def blobs_small():
    return make_blobs(120, 4, 3, 1.5, seed=3)
