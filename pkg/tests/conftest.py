import pytest

from envrisk.model import BusinessLine, EnvironmentSpec, ExponentialClaims, GaussianClaims, ModelSpec


def exp_line(lam, theta=1.0, r=1.0):
    return BusinessLine(r, (lam,), (ExponentialClaims(theta),))


def single_state_model(*lines):
    return ModelSpec(tuple(lines), EnvironmentSpec((1.0,)))


@pytest.fixture
def line05():
    return exp_line(0.5)


@pytest.fixture
def gauss_line():
    return BusinessLine(1.0, (0.709,), (GaussianClaims(1.0, 1.0),))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
