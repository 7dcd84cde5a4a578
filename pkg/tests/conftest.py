import math

import pytest
from hypothesis import HealthCheck, settings

from lplab.backgrounds import Cigar, Flat, FlowParams, Sphere

settings.register_profile("lplab", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("lplab")

ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def flat2():
    return Flat(2)


@pytest.fixture
def sphere2():
    return Sphere(2, 1.0)


@pytest.fixture
def cigar():
    return Cigar()


def params(p, tau_max=math.inf, p0=None):
    return FlowParams(p, tau_max, p0)


@pytest.fixture
def report():
    """Record one acceptance line; printed live and again in the terminal summary."""
    def _report(k, ok, detail):
        line = f"criterion {k}: {'PASS' if ok else 'FAIL'} {detail}"
        ACCEPTANCE.append(line)
        print(line)
        return ok
    return _report
