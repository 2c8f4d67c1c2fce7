import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from slalab.data import DomainSpec, generate_task

settings.register_profile(
    "fixed", max_examples=1000, derandomize=True, deadline=None, database=None,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("SLALAB_HYPOTHESIS_PROFILE", "fixed"))

# filled by tests/test_acceptance.py, printed at the end of the session
ACCEPTANCE_LINES: list = []


def pytest_configure(config):
    config.addinivalue_line("markers", "property: randomized invariant suite")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


SMALL_SPEC = DomainSpec(n_source_per_class=40, n_unlabeled_per_class=40, n_test_per_class=20)


@pytest.fixture(scope="session")
def small_task():
    return generate_task(SMALL_SPEC, 3, 0)


@pytest.fixture(scope="session")
def default_task():
    return generate_task(DomainSpec(), 3, 0)


def rel_err(a, b, floor=1e-8):
    """Elementwise relative error; entries where both sides are tiny compare absolutely."""
    a, b = np.asarray(a), np.asarray(b)
    scale = np.maximum(np.abs(a), np.abs(b))
    return np.where(scale < floor, np.abs(a - b), np.abs(a - b) / np.maximum(scale, floor))
