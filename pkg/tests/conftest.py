import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=25, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.register_profile("ci", max_examples=100, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_ACCEPTANCE = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    key = props["criterion"]
    entry = _ACCEPTANCE.setdefault(key, {"outcome": "passed", "detail": ""})
    if report.when == "call" or report.outcome != "passed":
        if report.outcome != "passed":
            entry["outcome"] = report.outcome
        if props.get("detail"):
            entry["detail"] = props["detail"]


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE):
        entry = _ACCEPTANCE[key]
        verdict = "PASS" if entry["outcome"] == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {key:>2}: {verdict}  {entry['detail']}")
