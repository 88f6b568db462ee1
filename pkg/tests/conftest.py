import os

import numpy as np
import pytest

from ccf import kernels

ORACLES = np.load(os.path.join(os.path.dirname(__file__), "oracles", "frozen.npz"))


@pytest.fixture(params=sorted(kernels.IMPLEMENTATIONS))
def kernel_impl(request):
    """Run the test once per available kernel implementation."""
    previous = kernels.BACKEND
    kernels.use(request.param)
    yield request.param
    kernels.use(previous)


@pytest.fixture
def oracles():
    return ORACLES


# acceptance reporting: each acceptance test stores its measurements in
# ``report`` and the session ends with one PASS/FAIL line per check

_REPORT = {}


@pytest.fixture
def report(request):
    values = {}
    _REPORT[request.node.nodeid] = [None, values]
    return values


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    entry = _REPORT.get(item.nodeid)
    if entry is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        entry[0] = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _REPORT:
        return
    terminalreporter.section("acceptance checks")
    for nodeid, (status, values) in _REPORT.items():
        name = nodeid.split("::")[-1]
        detail = ", ".join(f"{k}={_fmt(v)}" for k, v in values.items())
        terminalreporter.write_line(f"{status or 'FAIL':4s} {name}: {detail}")


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)
