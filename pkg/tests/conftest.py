import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def bench():
    """Default synthetic benchmark, plan and config with a shared pretrained model."""
    from orco.data import SyntheticSpec, generate_synthetic
    from orco.protocol import PhaseConfig, SessionPlan, pretrain_only

    ds = generate_synthetic(SyntheticSpec(seed=0))
    plan = SessionPlan()
    cfg = PhaseConfig(seed=0)
    return ds, plan, cfg, pretrain_only(cfg, plan, ds)


_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "setup" and report.outcome != "passed":
        _ACCEPTANCE[number] = (title, "FAIL" if report.failed else "SKIP")
    elif report.when == "call":
        measured = ", ".join(f"{k}={v}" for k, v in report.user_properties)
        _ACCEPTANCE[number] = (f"{title} [{measured}]" if measured else title, "PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status = _ACCEPTANCE[number]
        terminalreporter.write_line(f"{status} criterion {number:2d}: {title}")
