import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)



# acceptance criterion bookkeeping: nodeid -> {n, title, passed, detail}
_criteria = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("acceptance")
        if m is not None:
            n, title = m.args
            _criteria[item.nodeid] = {"n": n, "title": title, "passed": None, "detail": ""}


def pytest_runtest_logreport(report):
    rec = _criteria.get(report.nodeid)
    if rec is None:
        return
    if report.failed or report.skipped:
        rec["passed"] = False
    elif report.when == "call" and rec["passed"] is None:
        rec["passed"] = True
    for key, value in report.user_properties:
        if key == "detail":
            rec["detail"] = value


def pytest_terminal_summary(terminalreporter):
    ran = [r for r in _criteria.values() if r["passed"] is not None]
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for rec in sorted(ran, key=lambda r: r["n"]):
        status = "PASS" if rec["passed"] else "FAIL"
        terminalreporter.write_line(f"criterion {rec['n']:>2} {status}  {rec['title']}: {rec['detail']}")
